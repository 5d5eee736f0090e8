#include <gridmind/checkpoint.hpp>
#include <gridmind/data.hpp>
#include <gridmind/metrics.hpp>
#include <gridmind/rl.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>

namespace gridmind {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("rl: " + msg); }

// per-row exact KL from two log-softmax matrices over the same rows
std::vector<double> row_kls(const Tensor& cur_lsm, const Tensor& ref_lsm) {
  int n = cur_lsm.rows(), V = cur_lsm.cols();
  std::vector<double> out(size_t(n), 0.0);
  for (int r = 0; r < n; ++r) {
    const double* lp = cur_lsm.values().data() + size_t(r) * size_t(V);
    const double* lq = ref_lsm.values().data() + size_t(r) * size_t(V);
    double kl = 0.0;
    for (int v = 0; v < V; ++v) kl += std::exp(lp[v]) * (lp[v] - lq[v]);
    out[size_t(r)] = kl;
  }
  return out;
}

}  // namespace

std::vector<int> RolloutStep::sequence() const {
  std::vector<int> seq = prefix;
  seq.insert(seq.end(), cot.begin(), cot.end());
  seq.insert(seq.end(), actions.begin(), actions.end());
  return seq;
}

int Trajectory::scored_tokens() const {
  int n = 0;
  for (const RolloutStep& s : steps) n += s.scored_tokens();
  return n;
}

double compute_reward(bool success, bool format_ok, const RewardConfig& cfg) {
  return cfg.alpha_success * (success ? 1.0 : 0.0) + cfg.alpha_format * (format_ok ? 1.0 : 0.0);
}

bool trajectory_format_ok(const Trajectory& t, int max_cot_len) {
  for (const RolloutStep& s : t.steps)
    if (s.truncated || !validate_schema(s.cot, max_cot_len).ok) return false;
  return true;
}

std::vector<double> compute_group_advantage(const std::vector<double>& rewards) {
  size_t g = rewards.size();
  if (g < 2) fail("advantage needs a group of at least 2");
  double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / double(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  double std_pop = std::sqrt(var / double(g));
  std::vector<double> adv(g, 0.0);
  if (std_pop < 1e-6) return adv;  // degenerate group carries no signal
  for (size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / std_pop;
  return adv;
}

Trajectory rollout_episode(const Policy& behavior, const TaskSuite& suite, const TaskSpec& task,
                           uint64_t env_seed, uint64_t sample_seed, double temperature,
                           const RewardConfig& rcfg) {
  WorldState state = reset(suite, task, env_seed);
  Rng rng(sample_seed);
  Trajectory traj;

  bool done = false;
  while (!done) {
    RolloutStep st;
    st.prefix = prefix_tokens(state, task, behavior.vocab);

    DecodeSession session(behavior);
    session.append(st.prefix, behavior.cfg.prefix_causal() ? DecodeSession::Mode::causal
                                                           : DecodeSession::Mode::block);
    CotResult cot = generate_cot(behavior, session, behavior.cfg.max_cot_len, temperature, &rng);
    ActionDecodeResult act = decode_actions_parallel(behavior, session, temperature, &rng);

    st.cot = cot.tokens;
    st.actions = act.tokens;
    st.truncated = cot.truncated;
    st.sampled_logprobs = cot.logprobs;
    st.sampled_logprobs.insert(st.sampled_logprobs.end(), act.logprobs.begin(),
                               act.logprobs.end());
    // canonical behavior logprobs come from the full-sequence scoring path, so
    // a later rescore against the same snapshot reproduces them bit-for-bit
    st.logprobs = sequence_logprobs(behavior, st.sequence(), st.layout());

    StepResult sr = step_chunk(state, act.chunk, task.max_steps);
    done = sr.done;
    traj.steps.push_back(std::move(st));
  }

  traj.success = task_success(state);
  traj.format_ok = trajectory_format_ok(traj, behavior.cfg.max_cot_len);
  traj.reward = compute_reward(traj.success, traj.format_ok, rcfg);
  return traj;
}

RolloutGroup collect_rollouts(const Policy& behavior, const TaskSuite& suite, const TaskSpec& task,
                              int group_size, uint64_t seed, double temperature,
                              const RewardConfig& rcfg) {
  if (group_size < 2) fail("group size must be >= 2");
  RolloutGroup group;
  group.task_id = task.id;
  std::vector<double> rewards;
  for (int k = 0; k < group_size; ++k) {
    uint64_t env_seed = mix_seed(seed, 0x0e5ULL, uint64_t(k));
    uint64_t sample_seed = mix_seed(seed, 0x5a3ULL, uint64_t(k));
    group.trajectories.push_back(
        rollout_episode(behavior, suite, task, env_seed, sample_seed, temperature, rcfg));
    rewards.push_back(group.trajectories.back().reward);
  }
  group.advantages = compute_group_advantage(rewards);
  return group;
}

std::vector<double> clipped_surrogate(const std::vector<double>& ratios, double advantage,
                                      double eps_low, double eps_high) {
  std::vector<double> out;
  out.reserve(ratios.size());
  for (double w : ratios) {
    double clamped = std::min(std::max(w, 1.0 - eps_low), 1.0 + eps_high);
    out.push_back(std::min(w * advantage, clamped * advantage));
  }
  return out;
}

Tensor clipped_surrogate_tensor(const Tensor& logprobs, const std::vector<double>& behavior_logprobs,
                                double advantage, double eps_low, double eps_high) {
  if (logprobs.size() != behavior_logprobs.size())
    fail("logprob count mismatch: " + std::to_string(logprobs.size()) + " current vs " +
         std::to_string(behavior_logprobs.size()) + " behavior");
  Tensor base({int(behavior_logprobs.size())}, behavior_logprobs);
  Tensor ratio = exp(sub(logprobs, base));
  for (double w : ratio.values())
    if (!std::isfinite(w))
      throw std::runtime_error("rl: non-finite importance ratio " + std::to_string(w));
  return minimum(scale(ratio, advantage),
                 scale(clamp(ratio, 1.0 - eps_low, 1.0 + eps_high), advantage));
}

double kl_penalty(const Policy& current, const Policy& reference,
                  const std::vector<std::vector<int>>& sequences,
                  const std::vector<SequenceLayout>& layouts) {
  if (sequences.size() != layouts.size()) fail("kl_penalty: sequences/layouts size mismatch");
  double total = 0.0;
  long long positions = 0;
  for (size_t i = 0; i < sequences.size(); ++i) {
    ScoredPositions sp = scored_positions(sequences[i], layouts[i]);
    Tensor cur = log_softmax(select_rows(policy_forward(current, sp.input_tokens, layouts[i]),
                                         sp.rows));
    Tensor ref = log_softmax(select_rows(policy_forward(reference, sp.input_tokens, layouts[i]),
                                         sp.rows));
    for (double kl : row_kls(cur, ref)) total += kl;
    positions += int(sp.rows.size());
  }
  if (positions == 0) fail("kl_penalty: no scored positions");
  return total / double(positions);
}

GrpoStats grpo_step(const std::vector<RolloutGroup>& groups, Policy& current,
                    const Policy& behavior, const Policy& reference, Adam& opt,
                    const GrpoConfig& cfg) {
  struct Item {
    const Trajectory* traj;
    double advantage;
  };
  std::vector<Item> items;
  for (const RolloutGroup& g : groups) {
    if (g.trajectories.size() != g.advantages.size())
      fail("group advantages not computed (" + std::to_string(g.trajectories.size()) +
           " trajectories, " + std::to_string(g.advantages.size()) + " advantages)");
    for (size_t i = 0; i < g.trajectories.size(); ++i)
      items.push_back({&g.trajectories[i], g.advantages[i]});
  }
  if (items.empty()) fail("grpo_step: no trajectories");

  GrpoStats stats;
  stats.trajectories = int(items.size());

  opt.zero_grad();
  Tape tape;
  Tensor surrogate_sum, kl_sum;
  int clipped = 0;

  for (const Item& item : items) {
    const Trajectory& traj = *item.traj;
    int n_tokens = traj.scored_tokens();
    if (n_tokens == 0) fail("trajectory with no scored tokens");
    stats.tokens_per_trajectory.push_back(n_tokens);
    stats.mean_reward += traj.reward;

    Tensor traj_sum;
    for (const RolloutStep& step : traj.steps) {
      std::vector<int> seq = step.sequence();
      SequenceLayout layout = step.layout();
      ScoredPositions sp = scored_positions(seq, layout);

      // behavior baseline: stored at rollout time, or rescored here for
      // hand-built trajectories
      std::vector<double> rescored;
      const std::vector<double>* base = &step.logprobs;
      if (base->empty()) {
        rescored = sequence_logprobs(behavior, seq, layout);
        base = &rescored;
      }
      if (base->size() != sp.rows.size())
        fail("stored logprob count " + std::to_string(base->size()) + " != scored positions " +
             std::to_string(sp.rows.size()));

      Tensor logits = policy_forward(current, sp.input_tokens, layout);
      Tensor lsm = log_softmax(select_rows(logits, sp.rows));
      Tensor lp = gather_cols(lsm, sp.targets);

      Tensor tok = clipped_surrogate_tensor(lp, *base, item.advantage, cfg.eps_low, cfg.eps_high);
      traj_sum = traj_sum.defined() ? add(traj_sum, sum(tok)) : sum(tok);

      // reference is untracked, so its forward records nothing on the tape
      Tensor ref_lsm = log_softmax(
          select_rows(policy_forward(reference, sp.input_tokens, layout), sp.rows));
      Tensor kl_term = sum(mul(exp(lsm), sub(lsm, ref_lsm)));
      kl_sum = kl_sum.defined() ? add(kl_sum, kl_term) : kl_term;

      for (double k : row_kls(lsm, ref_lsm)) stats.position_kls.push_back(k);
      for (size_t i = 0; i < sp.rows.size(); ++i) {
        double w = std::exp(lp.values()[i] - (*base)[i]);
        stats.ratios.push_back(w);
        stats.advantages.push_back(item.advantage);
        if (w < 1.0 - cfg.eps_low || w > 1.0 + cfg.eps_high) ++clipped;
      }
      stats.scored_tokens += int(sp.rows.size());
    }
    Tensor traj_mean = scale(traj_sum, 1.0 / double(n_tokens));
    surrogate_sum = surrogate_sum.defined() ? add(surrogate_sum, traj_mean) : traj_mean;
  }

  Tensor j_surr = scale(surrogate_sum, 1.0 / double(items.size()));
  Tensor kl_mean = scale(kl_sum, 1.0 / double(stats.scored_tokens));
  Tensor objective = sub(j_surr, scale(kl_mean, cfg.beta));

  stats.surrogate = j_surr.item();
  stats.kl = kl_mean.item();
  stats.objective = objective.item();
  stats.mean_reward /= double(items.size());
  stats.clip_fraction = double(clipped) / double(stats.scored_tokens);
  if (!std::isfinite(stats.objective))
    throw std::runtime_error("rl: non-finite objective (surrogate " +
                             std::to_string(stats.surrogate) + ", kl " + std::to_string(stats.kl) +
                             ", " + std::to_string(stats.trajectories) + " trajectories)");

  Tensor loss = neg(objective);
  tape.backward(loss);
  opt.step();
  return stats;
}

RlResult train_rl(const RunConfig& cfg, const TaskSuite& suite, const std::string& init_checkpoint,
                  const std::string& out_dir) {
  if (suite.tasks.empty()) fail("suite has no tasks");
  std::filesystem::create_directories(out_dir);

  Policy current = load_checkpoint(init_checkpoint, Role::current);
  Policy reference = load_checkpoint(init_checkpoint, Role::reference);
  Adam opt(current.trainable(), {cfg.rl.lr, 0.9, 0.999, 1e-8});
  MetricsWriter metrics(out_dir + "/rl_metrics.jsonl");

  RlResult result;
  int n_tasks = int(suite.tasks.size());

  for (int it = 0; it < cfg.rl.iterations; ++it) {
    Policy behavior = current.clone_as(Role::behavior);

    std::vector<RolloutGroup> groups;
    for (int k = 0; k < cfg.rl.tasks_per_iteration; ++k) {
      const TaskSuite::TaskDef& def =
          suite.tasks[size_t((it * cfg.rl.tasks_per_iteration + k) % n_tasks)];
      TaskSpec task = suite.task(def.id);
      groups.push_back(collect_rollouts(behavior, suite, task, cfg.rl.group_size,
                                        mix_seed(cfg.rl.seed, uint64_t(it), uint64_t(task.id)),
                                        cfg.rl.temperature, cfg.rl.reward));
    }

    double mean_reward = 0.0, sr = 0.0, format_rate = 0.0;
    int n_traj = 0;
    std::vector<std::pair<int, int>> index;  // (group, trajectory)
    for (size_t g = 0; g < groups.size(); ++g)
      for (size_t t = 0; t < groups[g].trajectories.size(); ++t) {
        const Trajectory& traj = groups[g].trajectories[t];
        mean_reward += traj.reward;
        sr += traj.success ? 1.0 : 0.0;
        format_rate += traj.format_ok ? 1.0 : 0.0;
        ++n_traj;
        index.push_back({int(g), int(t)});
      }
    mean_reward /= double(n_traj);
    sr /= double(n_traj);
    format_rate /= double(n_traj);

    double kl_acc = 0.0, clip_acc = 0.0;
    int step_count = 0;
    for (int epoch = 0; epoch < cfg.rl.epochs; ++epoch) {
      Rng shuffle_rng(mix_seed(cfg.rl.seed, 0xeb0cULL, uint64_t(it), uint64_t(epoch)));
      std::vector<std::pair<int, int>> order = index;
      for (int i = int(order.size()) - 1; i > 0; --i)
        std::swap(order[size_t(i)], order[size_t(shuffle_rng.uniform_int(i + 1))]);

      // whole trajectories packed up to the token budget, always at least one
      size_t pos = 0;
      while (pos < order.size()) {
        std::vector<RolloutGroup> minibatch;
        int tokens = 0;
        while (pos < order.size()) {
          auto [g, t] = order[pos];
          int n = groups[size_t(g)].trajectories[size_t(t)].scored_tokens();
          if (!minibatch.empty() && tokens + n > cfg.rl.minibatch_tokens) break;
          minibatch.push_back({groups[size_t(g)].task_id,
                               {groups[size_t(g)].trajectories[size_t(t)]},
                               {groups[size_t(g)].advantages[size_t(t)]}});
          tokens += n;
          ++pos;
        }
        GrpoStats st = grpo_step(minibatch, current, behavior, reference, opt, cfg.rl);
        kl_acc += st.kl;
        clip_acc += st.clip_fraction;
        ++step_count;
      }
    }

    metrics.write({{"iteration", double(it)},
                   {"mean_reward", mean_reward},
                   {"sr", sr},
                   {"kl", kl_acc / double(step_count)},
                   {"clip_frac", clip_acc / double(step_count)},
                   {"format_rate", format_rate}});
    result.mean_rewards.push_back(mean_reward);
    result.format_rates.push_back(format_rate);
    save_checkpoint(current, out_dir + "/ckpt_rl.bin");
  }

  result.checkpoint_path = out_dir + "/ckpt_rl.bin";
  if (cfg.rl.iterations == 0) save_checkpoint(current, result.checkpoint_path);
  return result;
}

}  // namespace gridmind
