#pragma once

#include <gridmind/config.hpp>
#include <gridmind/env.hpp>
#include <gridmind/model.hpp>
#include <gridmind/rng.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace gridmind {

enum class CotMode { full, mask, random };
enum class DecodeMode { hybrid, ar_emulation };

// parse the config strings; throws invalid_argument on unknown names
CotMode cot_mode_from(const std::string& name);
DecodeMode decode_mode_from(const std::string& name);

// Inference-time reasoning interventions. mask ignores the input and the rng
// entirely; random keeps the delimiters and fills the body with random_len
// uniform text-vocabulary words, destroying semantics but not structure.
std::vector<int> intervene_cot(const std::vector<int>& cot, CotMode mode, const VocabSpec& vocab,
                               int random_len, Rng& rng);

struct EpisodeResult {
  bool success = false;
  int chunks = 0;                       // decode rounds executed
  int env_steps = 0;                    // primitive steps consumed
  long long forward_passes = 0;         // session passes across the episode
  std::vector<std::vector<int>> cots;   // reasoning span fed to the action decode, per chunk
};

// Greedy closed-loop episode: per chunk the prefix is re-encoded, the
// reasoning span is generated (or replaced per cot_mode), and the action block
// is decoded in one pass (hybrid) or slot by slot (ar_emulation).
EpisodeResult run_episode(const Policy& p, const TaskSuite& suite, const TaskSpec& task,
                          uint64_t env_seed, const EvalConfig& cfg, uint64_t intervention_seed);

// the scripted expert driven through the same seeded episode loop
EpisodeResult run_expert_episode(const TaskSuite& suite, const TaskSpec& task, uint64_t env_seed,
                                 int h);

struct TaskEval {
  int task_id = 0;
  int episodes = 0;
  int successes = 0;
  double sr = 0.0;
};

struct EvalReport {
  std::vector<TaskEval> tasks;
  double suite_sr = 0.0;         // mean of the per-task success rates
  long long forward_passes = 0;  // total across every episode
  int episodes = 0;
  int chunks = 0;
  std::string cot_mode;
  std::string decode_mode;
  int n_conditions = 0;
  uint64_t seed = 0;
  std::string config_hash;
  double wall_clock_s = 0.0;  // informational; excluded from the canonical JSON
};

// canonical deterministic JSON (sorted keys, no timings)
std::string report_json(const EvalReport& r);
void save_eval_report(const EvalReport& r, const std::string& path);

// n_conditions seeded greedy episodes per task; throws when the checkpoint
// vocabulary does not match the suite
EvalReport evaluate(const Policy& p, const TaskSuite& suite, const RunConfig& cfg);
EvalReport evaluate_expert(const TaskSuite& suite, const RunConfig& cfg);

// median number of body tokens (delimiters excluded) the policy generates
// greedily across the evaluation grid; at least 1
int median_cot_body_length(const Policy& p, const TaskSuite& suite, const RunConfig& cfg);

struct LatencyReport {
  int chunks = 0;
  int h = 0;
  int d = 0;
  long long hybrid_passes_per_chunk = 0;  // instrumented, exact
  long long ar_passes_per_chunk = 0;      // instrumented, exact
  double hybrid_ms = 0.0;                 // mean wall-clock per action block
  double ar_ms = 0.0;
  double cot_ms = 0.0;                    // mean wall-clock to generate one reasoning span
  double cot_passes_mean = 0.0;
};

// Times the action-block decode on copies of identically primed sessions so
// both modes see the same cache state. Pass counts are instrumented per chunk
// and must be exactly 1 (hybrid) and h*d (ar_emulation); wall-clock is
// averaged over n_chunks fresh contexts.
LatencyReport measure_latency(const Policy& p, const TaskSuite& suite, const RunConfig& cfg,
                              int n_chunks = 50);

// minimal deterministic SVG emitters for run artifacts
void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<std::string>& labels,
                         const std::vector<double>& values, const std::string& y_label,
                         double y_max = 0.0);
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::vector<std::string>& series_names,
                          const std::vector<std::vector<double>>& series,
                          const std::string& y_label);

struct AblationCell {
  std::string snapshot;  // "sft" or "rl"
  std::string cot_mode;  // "full", "mask", "random"
  std::vector<double> seed_srs;
  double mean_sr = 0.0;
};

struct AblationResult {
  std::vector<AblationCell> cells;  // fixed order: sft/rl x full/mask/random
  LatencyReport latency;
  int random_cot_len = 0;  // body length used by the random intervention
  std::vector<uint64_t> seeds;
  std::vector<std::string> files;  // emitted artifact paths
};

// Full comparison grid over both checkpoints and all reasoning interventions,
// averaged over n_seeds evaluation seeds, plus the two latency rows. Emits a
// text table, a JSON summary, and SVG charts under out_dir.
AblationResult run_ablation_suite(const std::string& sft_ckpt, const std::string& rl_ckpt,
                                  const RunConfig& cfg, const std::string& out_dir,
                                  int n_seeds = 3);

std::string ablation_table(const AblationResult& r);

}  // namespace gridmind
