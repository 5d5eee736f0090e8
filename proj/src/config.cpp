#include <gridmind/config.hpp>
#include <gridmind/rng.hpp>

#include <json.hpp>

#include <fstream>
#include <stdexcept>

namespace gridmind {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("config: " + msg); }

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json model_json(const ModelConfig& m) {
  json j;
  j["layers"] = m.layers;
  j["heads"] = m.heads;
  j["model_dim"] = m.model_dim;
  j["mlp_mult"] = m.mlp_mult;
  j["h"] = m.h;
  j["d"] = m.d;
  j["B"] = m.action_bins;
  j["max_cot_len"] = m.max_cot_len;
  j["max_seq_len"] = m.max_seq_len;
  j["prefix_attention"] = m.prefix_attention;
  j["init_scale"] = m.init_scale;
  return j;
}

void model_from(const json& j, ModelConfig& m) {
  get_if(j, "layers", m.layers);
  get_if(j, "heads", m.heads);
  get_if(j, "model_dim", m.model_dim);
  get_if(j, "mlp_mult", m.mlp_mult);
  get_if(j, "h", m.h);
  get_if(j, "d", m.d);
  get_if(j, "B", m.action_bins);
  get_if(j, "max_cot_len", m.max_cot_len);
  get_if(j, "max_seq_len", m.max_seq_len);
  get_if(j, "prefix_attention", m.prefix_attention);
  get_if(j, "init_scale", m.init_scale);
}

json run_json(const RunConfig& c) {
  json j;
  j["model"] = model_json(c.model);
  j["data"] = {{"n_demos", c.data.n_demos}, {"seed", c.data.seed}};
  j["sft"] = {{"batch_size", c.sft.batch_size}, {"steps", c.sft.steps},     {"lr", c.sft.lr},
              {"cot_weight", c.sft.cot_weight}, {"cot_dropout", c.sft.cot_dropout},
              {"log_every", c.sft.log_every},   {"seed", c.sft.seed}};
  j["rl"] = {{"group_size", c.rl.group_size},
             {"iterations", c.rl.iterations},
             {"tasks_per_iteration", c.rl.tasks_per_iteration},
             {"temperature", c.rl.temperature},
             {"eps_low", c.rl.eps_low},
             {"eps_high", c.rl.eps_high},
             {"beta", c.rl.beta},
             {"lr", c.rl.lr},
             {"epochs", c.rl.epochs},
             {"minibatch_tokens", c.rl.minibatch_tokens},
             {"seed", c.rl.seed},
             {"alpha_success", c.rl.reward.alpha_success},
             {"alpha_format", c.rl.reward.alpha_format}};
  j["eval"] = {{"n_conditions", c.eval.n_conditions},
               {"seed", c.eval.seed},
               {"cot_mode", c.eval.cot_mode},
               {"decode_mode", c.eval.decode_mode},
               {"random_cot_len", c.eval.random_cot_len}};
  j["distractors"] = c.distractors;
  return j;
}

// the env/data side must agree with the model's action geometry
void sync_derived(RunConfig& c) {
  c.data.h = c.model.h;
  c.data.d = c.model.d;
  c.data.action_bins = c.model.action_bins;
  c.data.max_cot_len = c.model.max_cot_len;
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.data.n_demos = 500;
  sync_derived(c);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail("config file " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c = default_run_config();
  if (j.contains("model")) model_from(j.at("model"), c.model);
  if (j.contains("data")) {
    get_if(j.at("data"), "n_demos", c.data.n_demos);
    get_if(j.at("data"), "seed", c.data.seed);
  }
  if (j.contains("sft")) {
    const json& s = j.at("sft");
    get_if(s, "batch_size", c.sft.batch_size);
    get_if(s, "steps", c.sft.steps);
    get_if(s, "lr", c.sft.lr);
    get_if(s, "cot_weight", c.sft.cot_weight);
    get_if(s, "cot_dropout", c.sft.cot_dropout);
    get_if(s, "log_every", c.sft.log_every);
    get_if(s, "seed", c.sft.seed);
  }
  if (j.contains("rl")) {
    const json& r = j.at("rl");
    get_if(r, "group_size", c.rl.group_size);
    get_if(r, "iterations", c.rl.iterations);
    get_if(r, "tasks_per_iteration", c.rl.tasks_per_iteration);
    get_if(r, "temperature", c.rl.temperature);
    get_if(r, "eps_low", c.rl.eps_low);
    get_if(r, "eps_high", c.rl.eps_high);
    get_if(r, "beta", c.rl.beta);
    get_if(r, "lr", c.rl.lr);
    get_if(r, "epochs", c.rl.epochs);
    get_if(r, "minibatch_tokens", c.rl.minibatch_tokens);
    get_if(r, "seed", c.rl.seed);
    get_if(r, "alpha_success", c.rl.reward.alpha_success);
    get_if(r, "alpha_format", c.rl.reward.alpha_format);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    get_if(e, "n_conditions", c.eval.n_conditions);
    get_if(e, "seed", c.eval.seed);
    get_if(e, "cot_mode", c.eval.cot_mode);
    get_if(e, "decode_mode", c.eval.decode_mode);
    get_if(e, "random_cot_len", c.eval.random_cot_len);
  }
  get_if(j, "distractors", c.distractors);
  sync_derived(c);
  validate(c);
  return c;
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot write config file " + path);
  out << run_json(cfg).dump(2) << "\n";
}

std::string run_config_hash(const RunConfig& cfg) { return hex16(fnv1a64(run_json(cfg).dump())); }

std::string model_config_dump(const ModelConfig& m) { return model_json(m).dump(); }

ModelConfig model_config_parse(const std::string& json_text) {
  ModelConfig m;
  model_from(json::parse(json_text), m);
  return m;
}

void validate(const RunConfig& c) {
  c.model.validate();
  if (c.data.n_demos < 0) fail("data.n_demos must be >= 0");
  if (c.sft.batch_size < 1) fail("sft.batch_size must be >= 1");
  if (c.sft.steps < 0) fail("sft.steps must be >= 0");
  if (c.sft.lr <= 0.0) fail("sft.lr must be positive");
  if (c.sft.cot_weight < 0.0) fail("sft.cot_weight must be >= 0");
  if (c.sft.cot_dropout < 0.0 || c.sft.cot_dropout > 1.0) fail("sft.cot_dropout must be in [0,1]");
  if (c.rl.group_size < 2) fail("rl.group_size must be >= 2");
  if (!(0.0 < c.rl.eps_low && c.rl.eps_low <= c.rl.eps_high && c.rl.eps_high < 1.0))
    fail("rl clip ratios need 0 < eps_low <= eps_high < 1");
  if (c.rl.beta < 0.0) fail("rl.beta must be >= 0");
  if (c.rl.lr <= 0.0) fail("rl.lr must be positive");
  if (c.rl.epochs < 1) fail("rl.epochs must be >= 1");
  if (c.rl.minibatch_tokens < 1) fail("rl.minibatch_tokens must be >= 1");
  if (c.rl.tasks_per_iteration < 1) fail("rl.tasks_per_iteration must be >= 1");
  if (c.rl.iterations < 0) fail("rl.iterations must be >= 0");
  if (c.rl.reward.alpha_success <= 0.0) fail("rl.alpha_success must be positive");
  if (c.rl.reward.alpha_format < 0.0) fail("rl.alpha_format must be >= 0");
  if (c.rl.temperature < 0.0) fail("rl.temperature must be >= 0");
  if (c.eval.n_conditions < 1) fail("eval.n_conditions must be >= 1");
  if (c.eval.cot_mode != "full" && c.eval.cot_mode != "mask" && c.eval.cot_mode != "random")
    fail("eval.cot_mode must be full, mask, or random");
  if (c.eval.decode_mode != "hybrid" && c.eval.decode_mode != "ar_emulation")
    fail("eval.decode_mode must be hybrid or ar_emulation");
  if (c.eval.random_cot_len < 0) fail("eval.random_cot_len must be >= 0");
  if (c.data.h != c.model.h || c.data.d != c.model.d || c.data.action_bins != c.model.action_bins ||
      c.data.max_cot_len != c.model.max_cot_len)
    fail("data section out of sync with model action geometry");
}

}  // namespace gridmind
