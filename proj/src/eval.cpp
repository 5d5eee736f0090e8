#include <gridmind/eval.hpp>

#include <gridmind/checkpoint.hpp>
#include <gridmind/data.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace gridmind {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int places = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", places, v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("eval: cannot write " + path);
  out << text;
}

void check_vocab(const Policy& p, const TaskSuite& suite) {
  VocabSpec expect = suite_vocab(suite, p.cfg.action_bins);
  if (p.vocab.words != expect.words || p.vocab.action_bins != expect.action_bins)
    throw std::runtime_error("eval: checkpoint vocabulary does not match the task suite");
}

}  // namespace

CotMode cot_mode_from(const std::string& name) {
  if (name == "full") return CotMode::full;
  if (name == "mask") return CotMode::mask;
  if (name == "random") return CotMode::random;
  throw std::invalid_argument("eval: unknown cot_mode '" + name + "'");
}

DecodeMode decode_mode_from(const std::string& name) {
  if (name == "hybrid") return DecodeMode::hybrid;
  if (name == "ar_emulation") return DecodeMode::ar_emulation;
  throw std::invalid_argument("eval: unknown decode_mode '" + name + "'");
}

std::vector<int> intervene_cot(const std::vector<int>& cot, CotMode mode, const VocabSpec& vocab,
                               int random_len, Rng& rng) {
  (void)cot;  // the replacement never depends on what the model would have said
  if (mode == CotMode::mask) return {VocabSpec::THINK_OPEN, VocabSpec::THINK_CLOSE};
  if (mode != CotMode::random) throw std::invalid_argument("eval: intervene_cot needs mask or random");
  if (random_len < 0) throw std::invalid_argument("eval: random_len must be >= 0");
  if (vocab.words.empty()) throw std::invalid_argument("eval: vocabulary has no text words");
  std::vector<int> out;
  out.reserve(size_t(random_len) + 2);
  out.push_back(VocabSpec::THINK_OPEN);
  for (int i = 0; i < random_len; ++i)
    out.push_back(vocab.text_base() + rng.uniform_int(int(vocab.words.size())));
  out.push_back(VocabSpec::THINK_CLOSE);
  return out;
}

EpisodeResult run_episode(const Policy& p, const TaskSuite& suite, const TaskSpec& task,
                          uint64_t env_seed, const EvalConfig& cfg, uint64_t intervention_seed) {
  CotMode cmode = cot_mode_from(cfg.cot_mode);
  DecodeMode dmode = decode_mode_from(cfg.decode_mode);
  if (cmode == CotMode::random && cfg.random_cot_len + 2 > p.cfg.max_cot_len)
    throw std::invalid_argument("eval: random_cot_len " + std::to_string(cfg.random_cot_len) +
                                " does not fit max_cot_len " + std::to_string(p.cfg.max_cot_len));
  EpisodeResult r;
  WorldState state = reset(suite, task, env_seed);
  DecodeSession::Mode prefix_mode =
      p.cfg.prefix_causal() ? DecodeSession::Mode::causal : DecodeSession::Mode::block;
  while (true) {
    DecodeSession s(p);
    s.append(prefix_tokens(state, task, p.vocab), prefix_mode);
    std::vector<int> cot;
    if (cmode == CotMode::full) {
      cot = generate_cot(p, s, p.cfg.max_cot_len).tokens;
    } else {
      // interventions skip generation entirely; the span is appended verbatim
      Rng rng(mix_seed(intervention_seed, uint64_t(r.chunks)));
      cot = intervene_cot({}, cmode, p.vocab, cfg.random_cot_len, rng);
      s.append(cot, DecodeSession::Mode::causal);
    }
    ActionDecodeResult act = dmode == DecodeMode::hybrid ? decode_actions_parallel(p, s)
                                                         : decode_actions_autoregressive(p, s);
    r.cots.push_back(std::move(cot));
    r.chunks += 1;
    r.forward_passes += s.passes();
    StepResult step = step_chunk(state, act.chunk, task.max_steps);
    if (step.done) {
      r.success = step.success;
      break;
    }
  }
  r.env_steps = state.step_count;
  return r;
}

EpisodeResult run_expert_episode(const TaskSuite& suite, const TaskSpec& task, uint64_t env_seed,
                                 int h) {
  EpisodeResult r;
  WorldState state = reset(suite, task, env_seed);
  while (true) {
    ActionChunk chunk = expert_chunk(state, h, task.max_steps);
    r.chunks += 1;
    StepResult step = step_chunk(state, chunk, task.max_steps);
    if (step.done) {
      r.success = step.success;
      break;
    }
  }
  r.env_steps = state.step_count;
  return r;
}

namespace {

template <typename EpisodeFn>
EvalReport eval_grid(const TaskSuite& suite, const RunConfig& cfg, EpisodeFn episode) {
  if (cfg.eval.n_conditions < 1) throw std::invalid_argument("eval: n_conditions must be >= 1");
  auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.cot_mode = cfg.eval.cot_mode;
  rep.decode_mode = cfg.eval.decode_mode;
  rep.n_conditions = cfg.eval.n_conditions;
  rep.seed = cfg.eval.seed;
  rep.config_hash = run_config_hash(cfg);
  for (const TaskSuite::TaskDef& def : suite.tasks) {
    TaskSpec task = suite.task(def.id);
    TaskEval te;
    te.task_id = def.id;
    for (int cond = 0; cond < cfg.eval.n_conditions; ++cond) {
      uint64_t env_seed = mix_seed(cfg.eval.seed, uint64_t(task.id), uint64_t(cond));
      EpisodeResult er = episode(task, env_seed, mix_seed(env_seed, 0xd1ceULL));
      te.episodes += 1;
      te.successes += er.success;
      rep.forward_passes += er.forward_passes;
      rep.chunks += er.chunks;
      rep.episodes += 1;
    }
    te.sr = double(te.successes) / double(te.episodes);
    rep.tasks.push_back(te);
  }
  double total = 0.0;
  for (const TaskEval& te : rep.tasks) total += te.sr;
  rep.suite_sr = rep.tasks.empty() ? 0.0 : total / double(rep.tasks.size());
  rep.wall_clock_s = seconds_since(t0);
  return rep;
}

}  // namespace

EvalReport evaluate(const Policy& p, const TaskSuite& suite, const RunConfig& cfg) {
  check_vocab(p, suite);
  return eval_grid(suite, cfg, [&](const TaskSpec& task, uint64_t env_seed, uint64_t iseed) {
    return run_episode(p, suite, task, env_seed, cfg.eval, iseed);
  });
}

EvalReport evaluate_expert(const TaskSuite& suite, const RunConfig& cfg) {
  return eval_grid(suite, cfg, [&](const TaskSpec& task, uint64_t env_seed, uint64_t) {
    return run_expert_episode(suite, task, env_seed, cfg.model.h);
  });
}

std::string report_json(const EvalReport& r) {
  json j;
  j["chunks"] = r.chunks;
  j["config_hash"] = r.config_hash;
  j["cot_mode"] = r.cot_mode;
  j["decode_mode"] = r.decode_mode;
  j["episodes"] = r.episodes;
  j["forward_passes"] = r.forward_passes;
  j["n_conditions"] = r.n_conditions;
  j["seed"] = r.seed;
  j["suite_sr"] = r.suite_sr;
  json tasks = json::array();
  for (const TaskEval& te : r.tasks)
    tasks.push_back(
        {{"episodes", te.episodes}, {"sr", te.sr}, {"successes", te.successes}, {"task_id", te.task_id}});
  j["tasks"] = tasks;
  return j.dump(2) + "\n";
}

void save_eval_report(const EvalReport& r, const std::string& path) {
  write_text(path, report_json(r));
}

int median_cot_body_length(const Policy& p, const TaskSuite& suite, const RunConfig& cfg) {
  check_vocab(p, suite);
  EvalConfig probe = cfg.eval;
  probe.cot_mode = "full";
  probe.decode_mode = "hybrid";
  int conditions = std::min(cfg.eval.n_conditions, 5);
  std::vector<int> lengths;
  for (const TaskSuite::TaskDef& def : suite.tasks) {
    TaskSpec task = suite.task(def.id);
    for (int cond = 0; cond < conditions; ++cond) {
      uint64_t env_seed = mix_seed(cfg.eval.seed, uint64_t(task.id), uint64_t(cond));
      EpisodeResult er = run_episode(p, suite, task, env_seed, probe, mix_seed(env_seed, 0xd1ceULL));
      for (const std::vector<int>& cot : er.cots) lengths.push_back(int(cot.size()) - 2);
    }
  }
  if (lengths.empty()) return 1;
  std::sort(lengths.begin(), lengths.end());
  int median = lengths[(lengths.size() - 1) / 2];
  return std::max(1, std::min(median, p.cfg.max_cot_len - 2));
}

LatencyReport measure_latency(const Policy& p, const TaskSuite& suite, const RunConfig& cfg,
                              int n_chunks) {
  if (n_chunks < 1) throw std::invalid_argument("eval: latency needs n_chunks >= 1");
  check_vocab(p, suite);
  LatencyReport rep;
  rep.chunks = n_chunks;
  rep.h = p.cfg.h;
  rep.d = p.cfg.d;
  DecodeSession::Mode prefix_mode =
      p.cfg.prefix_causal() ? DecodeSession::Mode::causal : DecodeSession::Mode::block;
  const int n_tasks = int(suite.tasks.size());
  double hybrid_s = 0.0, ar_s = 0.0, cot_s = 0.0;
  long long cot_passes = 0;
  for (int k = 0; k < n_chunks; ++k) {
    TaskSpec task = suite.task(suite.tasks[size_t(k % n_tasks)].id);
    WorldState state = reset(suite, task, mix_seed(cfg.eval.seed, 0x1a7ULL, uint64_t(k)));
    DecodeSession base(p);
    base.append(prefix_tokens(state, task, p.vocab), prefix_mode);
    long long before = base.passes();
    auto t0 = std::chrono::steady_clock::now();
    generate_cot(p, base, p.cfg.max_cot_len);
    cot_s += seconds_since(t0);
    cot_passes += base.passes() - before;

    // both modes decode from copies of the identical primed cache
    DecodeSession hybrid = base;
    t0 = std::chrono::steady_clock::now();
    decode_actions_parallel(p, hybrid);
    hybrid_s += seconds_since(t0);
    long long hp = hybrid.passes() - base.passes();

    DecodeSession ar = base;
    t0 = std::chrono::steady_clock::now();
    decode_actions_autoregressive(p, ar);
    ar_s += seconds_since(t0);
    long long ap = ar.passes() - base.passes();

    if (k == 0) {
      rep.hybrid_passes_per_chunk = hp;
      rep.ar_passes_per_chunk = ap;
    } else if (hp != rep.hybrid_passes_per_chunk || ap != rep.ar_passes_per_chunk) {
      throw std::runtime_error("eval: per-chunk pass counts drifted at chunk " + std::to_string(k));
    }
  }
  rep.hybrid_ms = hybrid_s / n_chunks * 1e3;
  rep.ar_ms = ar_s / n_chunks * 1e3;
  rep.cot_ms = cot_s / n_chunks * 1e3;
  rep.cot_passes_mean = double(cot_passes) / n_chunks;
  return rep;
}

void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<std::string>& labels,
                         const std::vector<double>& values, const std::string& y_label,
                         double y_max) {
  if (labels.size() != values.size()) throw std::invalid_argument("svg: labels/values mismatch");
  if (y_max <= 0.0)
    for (double v : values) y_max = std::max(y_max, v);
  if (y_max <= 0.0) y_max = 1.0;
  const int bar_w = 56, gap = 28, left = 70, top = 50, plot_h = 220, bottom = 60;
  const int width = left + int(labels.size()) * (bar_w + gap) + gap + 10;
  const int height = top + plot_h + bottom;
  static const char* palette[4] = {"#4878cf", "#e8923c", "#5fa464", "#c15654"};
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\">\n";
  s += "<style>text{font-family:monospace;font-size:12px;fill:#222}</style>\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"24\" font-size=\"15\">" + title + "</text>\n";
  s += "<text x=\"12\" y=\"" + std::to_string(top + plot_h / 2) + "\" transform=\"rotate(-90 12 " +
       std::to_string(top + plot_h / 2) + ")\" text-anchor=\"middle\">" + y_label + "</text>\n";
  for (int tick = 0; tick <= 2; ++tick) {
    double v = y_max * tick / 2.0;
    int y = top + plot_h - int(plot_h * tick / 2.0);
    s += "<line x1=\"" + std::to_string(left - 4) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
         std::to_string(width - 10) + "\" y2=\"" + std::to_string(y) +
         "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
    s += "<text x=\"" + std::to_string(left - 8) + "\" y=\"" + std::to_string(y + 4) +
         "\" text-anchor=\"end\">" + fmt(v, 2) + "</text>\n";
  }
  for (size_t i = 0; i < labels.size(); ++i) {
    int h = int(plot_h * std::max(0.0, std::min(values[i] / y_max, 1.0)));
    int x = left + gap + int(i) * (bar_w + gap);
    int y = top + plot_h - h;
    s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
         std::to_string(bar_w) + "\" height=\"" + std::to_string(h) + "\" fill=\"" +
         palette[i % 4] + "\"/>\n";
    s += "<text x=\"" + std::to_string(x + bar_w / 2) + "\" y=\"" + std::to_string(y - 6) +
         "\" text-anchor=\"middle\">" + fmt(values[i], 3) + "</text>\n";
    s += "<text x=\"" + std::to_string(x + bar_w / 2) + "\" y=\"" +
         std::to_string(top + plot_h + 18) + "\" text-anchor=\"middle\">" + labels[i] + "</text>\n";
  }
  s += "</svg>\n";
  write_text(path, s);
}

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::vector<std::string>& series_names,
                          const std::vector<std::vector<double>>& series,
                          const std::string& y_label) {
  if (series_names.size() != series.size()) throw std::invalid_argument("svg: series mismatch");
  double lo = 0.0, hi = 1e-12;
  size_t longest = 2;
  for (const std::vector<double>& v : series)
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  for (const std::vector<double>& v : series) longest = std::max(longest, v.size());
  if (hi <= lo) hi = lo + 1.0;
  const int left = 70, top = 50, plot_w = 460, plot_h = 220, bottom = 40;
  const int width = left + plot_w + 160, height = top + plot_h + bottom;
  static const char* palette[4] = {"#4878cf", "#e8923c", "#5fa464", "#c15654"};
  auto px = [&](size_t i, size_t n) {
    return left + (n <= 1 ? 0 : int(double(plot_w) * double(i) / double(n - 1)));
  };
  auto py = [&](double v) { return top + plot_h - int(plot_h * (v - lo) / (hi - lo)); };
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\">\n";
  s += "<style>text{font-family:monospace;font-size:12px;fill:#222}</style>\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"24\" font-size=\"15\">" + title + "</text>\n";
  s += "<text x=\"12\" y=\"" + std::to_string(top + plot_h / 2) + "\" transform=\"rotate(-90 12 " +
       std::to_string(top + plot_h / 2) + ")\" text-anchor=\"middle\">" + y_label + "</text>\n";
  for (int tick = 0; tick <= 2; ++tick) {
    double v = lo + (hi - lo) * tick / 2.0;
    int y = py(v);
    s += "<line x1=\"" + std::to_string(left - 4) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
         std::to_string(left + plot_w) + "\" y2=\"" + std::to_string(y) +
         "\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
    s += "<text x=\"" + std::to_string(left - 8) + "\" y=\"" + std::to_string(y + 4) +
         "\" text-anchor=\"end\">" + fmt(v, 2) + "</text>\n";
  }
  for (size_t k = 0; k < series.size(); ++k) {
    const std::vector<double>& v = series[k];
    if (v.empty()) continue;
    std::string pts;
    for (size_t i = 0; i < v.size(); ++i)
      pts += std::to_string(px(i, v.size())) + "," + std::to_string(py(v[i])) + " ";
    s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + std::string(palette[k % 4]) +
         "\" stroke-width=\"2\"/>\n";
    int ly = top + 16 * int(k);
    s += "<rect x=\"" + std::to_string(left + plot_w + 16) + "\" y=\"" + std::to_string(ly - 9) +
         "\" width=\"10\" height=\"10\" fill=\"" + palette[k % 4] + "\"/>\n";
    s += "<text x=\"" + std::to_string(left + plot_w + 32) + "\" y=\"" + std::to_string(ly) +
         "\">" + series_names[k] + "</text>\n";
  }
  s += "</svg>\n";
  write_text(path, s);
}

std::string ablation_table(const AblationResult& r) {
  std::string s;
  s += "snapshot  cot      ";
  for (size_t i = 0; i < r.seeds.size(); ++i) s += "sr[s" + std::to_string(i) + "]  ";
  s += "mean\n";
  for (const AblationCell& c : r.cells) {
    char head[32];
    std::snprintf(head, sizeof(head), "%-9s %-8s ", c.snapshot.c_str(), c.cot_mode.c_str());
    s += head;
    for (double v : c.seed_srs) s += fmt(v, 3) + "   ";
    s += fmt(c.mean_sr, 3) + "\n";
  }
  s += "latency   hybrid   passes/chunk=" + std::to_string(r.latency.hybrid_passes_per_chunk) +
       "  rel=1.00\n";
  s += "latency   ar       passes/chunk=" + std::to_string(r.latency.ar_passes_per_chunk) +
       "  rel=" +
       fmt(double(r.latency.ar_passes_per_chunk) /
               double(std::max(1LL, r.latency.hybrid_passes_per_chunk)),
           2) +
       "\n";
  s += "random cot body length: " + std::to_string(r.random_cot_len) + "\n";
  return s;
}

AblationResult run_ablation_suite(const std::string& sft_ckpt, const std::string& rl_ckpt,
                                  const RunConfig& cfg, const std::string& out_dir, int n_seeds) {
  if (n_seeds < 1) throw std::invalid_argument("eval: ablation needs n_seeds >= 1");
  fs::create_directories(out_dir);
  Policy sft = load_checkpoint(sft_ckpt, Role::current);
  Policy rl = load_checkpoint(rl_ckpt, Role::current);
  TaskSuite suite = cfg.distractors ? TaskSuite::distractor_suite() : TaskSuite::default_suite();

  AblationResult out;
  RunConfig base = cfg;
  out.random_cot_len = median_cot_body_length(sft, suite, base);
  base.eval.random_cot_len = out.random_cot_len;
  for (int s = 0; s < n_seeds; ++s) out.seeds.push_back(cfg.eval.seed + uint64_t(s));

  const Policy* snapshots[2] = {&sft, &rl};
  static const char* snapshot_names[2] = {"sft", "rl"};
  static const char* modes[3] = {"full", "mask", "random"};
  for (int si = 0; si < 2; ++si) {
    for (int mi = 0; mi < 3; ++mi) {
      AblationCell cell;
      cell.snapshot = snapshot_names[si];
      cell.cot_mode = modes[mi];
      for (uint64_t seed : out.seeds) {
        RunConfig c = base;
        c.eval.cot_mode = modes[mi];
        c.eval.seed = seed;
        cell.seed_srs.push_back(evaluate(*snapshots[si], suite, c).suite_sr);
      }
      double total = 0.0;
      for (double v : cell.seed_srs) total += v;
      cell.mean_sr = total / double(cell.seed_srs.size());
      out.cells.push_back(cell);
    }
  }
  out.latency = measure_latency(rl, suite, base);

  std::string table_path = out_dir + "/ablation_table.txt";
  write_text(table_path, ablation_table(out));

  json j;
  j["random_cot_len"] = out.random_cot_len;
  j["seeds"] = out.seeds;
  json cells = json::array();
  for (const AblationCell& c : out.cells)
    cells.push_back({{"cot_mode", c.cot_mode},
                     {"mean_sr", c.mean_sr},
                     {"seed_srs", c.seed_srs},
                     {"snapshot", c.snapshot}});
  j["cells"] = cells;
  j["latency"] = {{"ar_passes_per_chunk", out.latency.ar_passes_per_chunk},
                  {"chunks", out.latency.chunks},
                  {"hybrid_passes_per_chunk", out.latency.hybrid_passes_per_chunk}};
  std::string json_path = out_dir + "/ablation.json";
  write_text(json_path, j.dump(2) + "\n");

  // wall-clock lives apart from the deterministic artifacts
  json t;
  t["ar_ms"] = out.latency.ar_ms;
  t["cot_ms"] = out.latency.cot_ms;
  t["cot_passes_mean"] = out.latency.cot_passes_mean;
  t["hybrid_ms"] = out.latency.hybrid_ms;
  std::string timing_path = out_dir + "/latency_timing.json";
  write_text(timing_path, t.dump(2) + "\n");

  std::vector<std::string> labels;
  std::vector<double> values;
  for (const AblationCell& c : out.cells) {
    labels.push_back(c.snapshot + "-" + c.cot_mode);
    values.push_back(c.mean_sr);
  }
  std::string sr_svg = out_dir + "/ablation_sr.svg";
  write_bar_chart_svg(sr_svg, "success rate by snapshot and reasoning mode", labels, values,
                      "success rate", 1.0);
  std::string lat_svg = out_dir + "/latency_passes.svg";
  write_bar_chart_svg(lat_svg, "forward passes per action chunk", {"hybrid", "ar"},
                      {double(out.latency.hybrid_passes_per_chunk),
                       double(out.latency.ar_passes_per_chunk)},
                      "passes per chunk");

  out.files = {table_path, json_path, timing_path, sr_svg, lat_svg};
  return out;
}

}  // namespace gridmind
