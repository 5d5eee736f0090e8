#pragma once

#include <gridmind/config.hpp>
#include <gridmind/env.hpp>
#include <gridmind/model.hpp>
#include <gridmind/optim.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace gridmind {

// One environment step of a rollout. logprobs are the canonical behavior
// log-probabilities (full-sequence rescoring, so importance ratios against the
// same code path are exactly 1 at a fresh behavior snapshot); sampled_logprobs
// are what the incremental decode session reported while sampling.
struct RolloutStep {
  std::vector<int> prefix;  // BOS + observation + instruction
  std::vector<int> cot;     // delimiters included
  std::vector<int> actions; // realized action ids, h*d of them
  std::vector<double> logprobs;
  std::vector<double> sampled_logprobs;
  bool truncated = false;

  SequenceLayout layout() const {
    return {int(prefix.size()), int(cot.size()), int(actions.size())};
  }
  std::vector<int> sequence() const;  // prefix + cot + realized actions
  int scored_tokens() const { return int(cot.size()) - 1 + int(actions.size()); }
};

struct Trajectory {
  std::vector<RolloutStep> steps;
  bool success = false;
  bool format_ok = false;
  double reward = 0.0;
  int scored_tokens() const;
};

// the unit of advantage standardization: G trajectories of one task
struct RolloutGroup {
  int task_id = 0;
  std::vector<Trajectory> trajectories;
  std::vector<double> advantages;
};

double compute_reward(bool success, bool format_ok, const RewardConfig& cfg);

// every step schema-valid and none truncated
bool trajectory_format_ok(const Trajectory& t, int max_cot_len);

// (r - mean) / population std; all zeros when std < 1e-6
std::vector<double> compute_group_advantage(const std::vector<double>& rewards);

Trajectory rollout_episode(const Policy& behavior, const TaskSuite& suite, const TaskSpec& task,
                           uint64_t env_seed, uint64_t sample_seed, double temperature,
                           const RewardConfig& rcfg);

// G episodes on one task with distinct env seeds derived from seed
RolloutGroup collect_rollouts(const Policy& behavior, const TaskSuite& suite, const TaskSpec& task,
                              int group_size, uint64_t seed, double temperature,
                              const RewardConfig& rcfg);

// per-token min(w*A, clamp(w, 1-eps_low, 1+eps_high)*A)
std::vector<double> clipped_surrogate(const std::vector<double>& ratios, double advantage,
                                      double eps_low, double eps_high);
// differentiable form on tracked current logprobs; throws on non-finite ratios
Tensor clipped_surrogate_tensor(const Tensor& logprobs, const std::vector<double>& behavior_logprobs,
                                double advantage, double eps_low, double eps_high);

// exact full-vocabulary KL(current || reference) averaged over the scored
// positions of the given realized sequences
double kl_penalty(const Policy& current, const Policy& reference,
                  const std::vector<std::vector<int>>& sequences,
                  const std::vector<SequenceLayout>& layouts);

struct GrpoStats {
  double objective = 0.0;   // surrogate - beta * kl, the ascended value
  double surrogate = 0.0;   // trajectory-mean of per-token clipped terms
  double kl = 0.0;          // mean over scored positions
  double mean_reward = 0.0;
  double clip_fraction = 0.0;  // scored tokens with ratio outside the band
  int trajectories = 0;
  int scored_tokens = 0;
  // flattened per-token diagnostics in trajectory order, for recompute oracles
  std::vector<int> tokens_per_trajectory;
  std::vector<double> ratios;
  std::vector<double> advantages;
  std::vector<double> position_kls;
};

// one ascent step on all trajectories in groups; advantages must be filled
GrpoStats grpo_step(const std::vector<RolloutGroup>& groups, Policy& current,
                    const Policy& behavior, const Policy& reference, Adam& opt,
                    const GrpoConfig& cfg);

struct RlResult {
  std::string checkpoint_path;
  std::vector<double> mean_rewards;   // per iteration
  std::vector<double> format_rates;   // per iteration
};

RlResult train_rl(const RunConfig& cfg, const TaskSuite& suite, const std::string& init_checkpoint,
                  const std::string& out_dir);

}  // namespace gridmind
