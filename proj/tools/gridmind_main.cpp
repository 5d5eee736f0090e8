#include <gridmind/checkpoint.hpp>
#include <gridmind/config.hpp>
#include <gridmind/data.hpp>
#include <gridmind/env.hpp>
#include <gridmind/eval.hpp>
#include <gridmind/metrics.hpp>
#include <gridmind/rl.hpp>
#include <gridmind/sft.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace gridmind;

namespace {

struct GlobalArgs {
  std::string config_path;
  long long seed = -1;  // negative keeps the seeds from the config file
  std::string out = "runs";
};

RunConfig effective_config(const GlobalArgs& g) {
  RunConfig cfg = g.config_path.empty() ? default_run_config() : load_run_config(g.config_path);
  if (g.seed >= 0) {
    cfg.data.seed = uint64_t(g.seed);
    cfg.sft.seed = uint64_t(g.seed);
    cfg.rl.seed = uint64_t(g.seed);
    cfg.eval.seed = uint64_t(g.seed);
  }
  validate(cfg);
  return cfg;
}

// every command writes under <out>/<command>_<confighash> so identical
// config+seed reruns land on the same artifacts
std::string make_run_dir(const GlobalArgs& g, const RunConfig& cfg, const std::string& name) {
  std::string dir = g.out + "/" + name + "_" + run_config_hash(cfg);
  fs::create_directories(dir);
  save_run_config(cfg, dir + "/config.json");
  std::cout << "run dir: " << dir << "\n";
  return dir;
}

TaskSuite suite_for(const RunConfig& cfg) {
  return cfg.distractors ? TaskSuite::distractor_suite() : TaskSuite::default_suite();
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

// loss/reward curves replotted from the metrics file the trainer wrote
std::vector<double> metrics_column(const std::string& path, const std::string& key) {
  std::ifstream in(path);
  std::vector<double> vals;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = read_metrics_line(line);
    auto it = row.find(key);
    if (it != row.end()) vals.push_back(it->second);
  }
  return vals;
}

int cmd_datagen(const GlobalArgs& g) {
  RunConfig cfg = effective_config(g);
  std::string dir = make_run_dir(g, cfg, "datagen");
  DatasetManifest m =
      build_dataset(suite_for(cfg), cfg.data, dir + "/dataset.jsonl", dir + "/manifest.json");
  std::printf("demos %d/%d, frames %d, records %d keyframe + %d propagated, drops %d+%d\n",
              m.demos_used, m.demos_requested, m.frames, m.keyframe_records, m.propagated_records,
              m.schema_drops, m.consistency_drops);
  return 0;
}

int cmd_sft(const GlobalArgs& g, const std::string& data_path) {
  RunConfig cfg = effective_config(g);
  std::string dir = make_run_dir(g, cfg, "sft");
  SftResult res = train_sft(cfg, suite_for(cfg), data_path, dir);
  std::vector<double> losses = metrics_column(dir + "/sft_metrics.jsonl", "loss");
  if (!losses.empty())
    write_line_chart_svg(dir + "/sft_loss.svg", "supervised training loss", {"loss"}, {losses},
                         "loss");
  std::printf("final loss %.4f (cot %.4f, action %.4f), %d records skipped\ncheckpoint: %s\n",
              res.last.loss, res.last.cot_loss, res.last.action_loss, res.skipped_records,
              res.checkpoint_path.c_str());
  return 0;
}

int cmd_rl(const GlobalArgs& g, const std::string& init_ckpt) {
  RunConfig cfg = effective_config(g);
  std::string dir = make_run_dir(g, cfg, "rl");
  RlResult res = train_rl(cfg, suite_for(cfg), init_ckpt, dir);
  if (!res.mean_rewards.empty())
    write_line_chart_svg(dir + "/rl_reward.svg", "grouped policy optimization",
                         {"mean reward", "format rate"}, {res.mean_rewards, res.format_rates},
                         "value");
  if (!res.mean_rewards.empty())
    std::printf("reward %.3f -> %.3f over %zu iterations\n", res.mean_rewards.front(),
                res.mean_rewards.back(), res.mean_rewards.size());
  std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt) {
  RunConfig cfg = effective_config(g);
  std::string dir = make_run_dir(g, cfg, "eval");
  Policy p = load_checkpoint(ckpt, Role::current);
  EvalReport rep = evaluate(p, suite_for(cfg), cfg);
  save_eval_report(rep, dir + "/eval_report.json");
  write_json(dir + "/eval_timing.json", {{"wall_clock_s", rep.wall_clock_s}});
  std::printf("suite sr %.3f over %d episodes (%s cot, %s decode)\n", rep.suite_sr, rep.episodes,
              rep.cot_mode.c_str(), rep.decode_mode.c_str());
  for (const TaskEval& te : rep.tasks)
    std::printf("  task %d: %d/%d\n", te.task_id, te.successes, te.episodes);
  return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& sft_ckpt, const std::string& rl_ckpt,
               int n_seeds) {
  RunConfig cfg = effective_config(g);
  std::string dir = make_run_dir(g, cfg, "ablate");
  AblationResult res = run_ablation_suite(sft_ckpt, rl_ckpt, cfg, dir, n_seeds);
  std::cout << ablation_table(res);
  return 0;
}

int cmd_latency(const GlobalArgs& g, const std::string& ckpt, int n_chunks) {
  RunConfig cfg = effective_config(g);
  std::string dir = make_run_dir(g, cfg, "latency");
  Policy p = load_checkpoint(ckpt, Role::current);
  LatencyReport rep = measure_latency(p, suite_for(cfg), cfg, n_chunks);
  write_json(dir + "/latency.json", {{"ar_passes_per_chunk", rep.ar_passes_per_chunk},
                                     {"chunks", rep.chunks},
                                     {"cot_passes_mean", rep.cot_passes_mean},
                                     {"d", rep.d},
                                     {"h", rep.h},
                                     {"hybrid_passes_per_chunk", rep.hybrid_passes_per_chunk}});
  write_json(dir + "/latency_timing.json",
             {{"ar_ms", rep.ar_ms}, {"cot_ms", rep.cot_ms}, {"hybrid_ms", rep.hybrid_ms}});
  std::printf("action block: hybrid %lld pass (%.3f ms) vs ar %lld passes (%.3f ms)\n",
              rep.hybrid_passes_per_chunk, rep.hybrid_ms, rep.ar_passes_per_chunk, rep.ar_ms);
  std::printf("reasoning span: %.1f passes, %.3f ms mean\n", rep.cot_passes_mean, rep.cot_ms);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridworld lab for a think-then-act manipulation policy"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option("--seed", g.seed, "override the seed of every stage");
  app.add_option("--out", g.out, "base output directory");

  CLI::App* datagen = app.add_subcommand("datagen", "build the reasoning-annotated dataset");
  CLI::App* sft = app.add_subcommand("sft", "supervised training from a dataset");
  std::string data_path;
  sft->add_option("--data", data_path, "dataset jsonl path")->required();
  CLI::App* rl = app.add_subcommand("rl", "grouped policy optimization from a checkpoint");
  std::string init_ckpt;
  rl->add_option("--init", init_ckpt, "initial (supervised) checkpoint")->required();
  CLI::App* ev = app.add_subcommand("eval", "success-rate evaluation of a checkpoint");
  std::string eval_ckpt;
  ev->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")->required();
  CLI::App* ablate = app.add_subcommand("ablate", "reasoning-intervention comparison grid");
  std::string sft_ckpt, rl_ckpt;
  int n_seeds = 3;
  ablate->add_option("--sft", sft_ckpt, "supervised checkpoint")->required();
  ablate->add_option("--rl", rl_ckpt, "policy-optimized checkpoint")->required();
  ablate->add_option("--seeds", n_seeds, "number of evaluation seeds");
  CLI::App* latency = app.add_subcommand("latency", "action-decode pass counts and timing");
  std::string lat_ckpt;
  int n_chunks = 50;
  latency->add_option("--ckpt", lat_ckpt, "checkpoint to time")->required();
  latency->add_option("--chunks", n_chunks, "contexts to average over");

  for (CLI::App* sub : {datagen, sft, rl, ev, ablate, latency}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (datagen->parsed()) return cmd_datagen(g);
    if (sft->parsed()) return cmd_sft(g, data_path);
    if (rl->parsed()) return cmd_rl(g, init_ckpt);
    if (ev->parsed()) return cmd_eval(g, eval_ckpt);
    if (ablate->parsed()) return cmd_ablate(g, sft_ckpt, rl_ckpt, n_seeds);
    if (latency->parsed()) return cmd_latency(g, lat_ckpt, n_chunks);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
