#pragma once

#include <gridmind/data.hpp>
#include <gridmind/model.hpp>

#include <cstdint>
#include <string>

namespace gridmind {

struct SftConfig {
  int batch_size = 32;
  int steps = 5000;
  double lr = 3e-4;
  double cot_weight = 1.0;     // per-token weight on reasoning positions
  double cot_dropout = 0.15;   // chance to train a frame with the empty <think></think> span
  int log_every = 50;
  uint64_t seed = 1;
};

struct RewardConfig {
  double alpha_success = 1.0;
  double alpha_format = 0.1;
};

struct GrpoConfig {
  int group_size = 8;
  int iterations = 20;
  int tasks_per_iteration = 5;  // round-robin slice of the suite per iteration
  double temperature = 1.0;
  double eps_low = 0.2;
  double eps_high = 0.28;
  double beta = 0.01;  // KL weight against the frozen reference
  double lr = 5e-5;
  int epochs = 2;
  int minibatch_tokens = 128;
  uint64_t seed = 1;
  RewardConfig reward;
};

struct EvalConfig {
  int n_conditions = 20;
  uint64_t seed = 1;
  std::string cot_mode = "full";      // full | mask | random
  std::string decode_mode = "hybrid";  // hybrid | ar_emulation
  int random_cot_len = 12;             // body tokens between the delimiters
};

struct RunConfig {
  ModelConfig model;
  DataGenConfig data;
  SftConfig sft;
  GrpoConfig rl;
  EvalConfig eval;
  bool distractors = false;  // evaluate/train on the distractor suite variant
};

RunConfig default_run_config();

// JSON file with optional sections model/data/sft/rl/eval; absent keys keep defaults
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

// stable 16-hex digest of the canonical serialized form
std::string run_config_hash(const RunConfig& cfg);

void validate(const RunConfig& cfg);

// canonical JSON text of one model section, shared with checkpoint sidecars
std::string model_config_dump(const ModelConfig& m);
ModelConfig model_config_parse(const std::string& json_text);

}  // namespace gridmind
