#include <gridmind/data.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace gridmind {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("data: " + msg); }

struct ObsView {
  Cell gripper;
  bool open = true;
  std::vector<std::pair<std::string, Cell>> objects;
  ZoneRect zone;
};

ObsView parse_obs(const std::vector<std::string>& obs) {
  if (obs.size() < 13 || obs[0] != "grip") fail("malformed observation");
  ObsView v;
  v.gripper = {std::stoi(obs[1]), std::stoi(obs[2])};
  v.open = obs[3] == "open";
  size_t i = 4;
  while (i + 2 < obs.size() && obs[i] != "zone") {
    v.objects.push_back({obs[i], {std::stoi(obs[i + 1]), std::stoi(obs[i + 2])}});
    i += 3;
  }
  if (i + 5 >= obs.size() || obs[i] != "zone") fail("observation lacks a zone block");
  v.zone = {obs[i + 1], std::stoi(obs[i + 2]), std::stoi(obs[i + 3]), std::stoi(obs[i + 4]),
            std::stoi(obs[i + 5])};
  return v;
}

Cell target_cell(const ObsView& v, const std::string& target_name) {
  for (const auto& [name, cell] : v.objects)
    if (name == target_name) return cell;
  fail("target object " + target_name + " missing from observation");
}

std::string phase_for(const ObsView& v, const std::string& target_name) {
  Cell obj = target_cell(v, target_name);
  bool held = !v.open && obj == v.gripper;
  if (held) return v.zone.contains(v.gripper) ? "release" : "transport";
  if (v.zone.contains(obj)) return "finish";
  if (v.gripper == obj) return "grasp";
  return "approach";
}

std::vector<int> cot_template(const VocabSpec& vocab, Cell gripper, const std::string& obj_name,
                              Cell obj, const std::string& phase) {
  std::vector<int> t;
  t.push_back(VocabSpec::THINK_OPEN);
  t.push_back(vocab.word_id("gripper"));
  t.push_back(vocab.word_id("at"));
  t.push_back(vocab.word_id(std::to_string(gripper.x)));
  t.push_back(vocab.word_id(std::to_string(gripper.y)));
  t.push_back(vocab.word_id(";"));
  t.push_back(vocab.word_id(obj_name));
  t.push_back(vocab.word_id("at"));
  t.push_back(vocab.word_id(std::to_string(obj.x)));
  t.push_back(vocab.word_id(std::to_string(obj.y)));
  t.push_back(vocab.word_id(";"));
  t.push_back(vocab.word_id("subtask"));
  t.push_back(vocab.word_id(phase));
  t.push_back(VocabSpec::THINK_CLOSE);
  return t;
}

// phase word of a templated reasoning line, empty when absent
std::string cot_phase(const std::vector<int>& cot, const VocabSpec& vocab) {
  int subtask_id = vocab.word_id("subtask");
  for (size_t i = 0; i + 1 < cot.size(); ++i)
    if (cot[i] == subtask_id && vocab.is_text(cot[i + 1])) return vocab.token_text(cot[i + 1]);
  return "";
}

}  // namespace

int phase_rank(const std::string& phase) {
  static const std::vector<std::string> order{"approach", "grasp", "transport", "release",
                                              "finish"};
  for (size_t i = 0; i < order.size(); ++i)
    if (order[i] == phase) return int(i);
  return int(order.size());
}

DemoTrajectory collect_demo(const TaskSuite& suite, const TaskSpec& task, uint64_t seed, int h) {
  if (h < 1) fail("collect_demo needs h >= 1");
  DemoTrajectory traj;
  traj.task = task;
  traj.seed = seed;
  WorldState s = reset(suite, task, seed);

  std::vector<std::array<double, 3>> actions;
  std::vector<std::pair<std::vector<std::string>, bool>> states;
  bool done = false, success = false;
  while (!done) {
    states.push_back({obs_tokens(s), s.gripper.open});
    std::array<double, 3> a = expert_action(s);
    PrimitiveResult r = step_primitive(s, a, task.max_steps);
    actions.push_back(a);
    done = r.done;
    success = r.success;
  }
  traj.success = success;

  // two held-still frames after the episode so the final gripper change is
  // interior and the finished state appears in the data
  states.push_back({obs_tokens(s), s.gripper.open});
  states.push_back({obs_tokens(s), s.gripper.open});

  for (size_t i = 0; i < states.size(); ++i) {
    DemoFrame f;
    f.obs = std::move(states[i].first);
    f.gripper_open = states[i].second;
    f.action_values.assign(size_t(h) * 3, 0.0);
    for (int j = 0; j < h; ++j) {
      size_t k = i + size_t(j);
      if (k >= actions.size()) break;
      for (int c = 0; c < 3; ++c) f.action_values[size_t(j) * 3 + size_t(c)] = actions[k][size_t(c)];
    }
    traj.frames.push_back(std::move(f));
  }
  return traj;
}

std::vector<int> extract_keyframes(const DemoTrajectory& traj) {
  if (traj.frames.empty()) fail("extract_keyframes on an empty trajectory");
  std::vector<int> kf{0};
  for (size_t i = 1; i < traj.frames.size(); ++i)
    if (traj.frames[i].gripper_open != traj.frames[i - 1].gripper_open) kf.push_back(int(i));
  kf.push_back(int(traj.frames.size()) - 1);
  std::sort(kf.begin(), kf.end());
  kf.erase(std::unique(kf.begin(), kf.end()), kf.end());
  return kf;
}

std::vector<int> annotate_keyframe(const DemoTrajectory& traj, int index, const VocabSpec& vocab) {
  if (index < 0 || index >= int(traj.frames.size())) fail("keyframe index out of range");
  ObsView v = parse_obs(traj.frames[size_t(index)].obs);
  Cell obj = target_cell(v, traj.task.object_name);
  return cot_template(vocab, v.gripper, traj.task.object_name, obj,
                      phase_for(v, traj.task.object_name));
}

std::vector<std::vector<int>> propagate_annotations(const DemoTrajectory& traj,
                                                    const std::vector<int>& keyframes,
                                                    const std::vector<std::vector<int>>& kf_cots,
                                                    const VocabSpec& vocab) {
  if (keyframes.size() != kf_cots.size()) fail("keyframes and annotations differ in length");
  if (keyframes.empty() || keyframes[0] != 0) fail("keyframes must start at index 0");
  std::vector<std::vector<int>> out(traj.frames.size());
  size_t k = 0;
  for (size_t i = 0; i < traj.frames.size(); ++i) {
    if (k + 1 < keyframes.size() && int(i) == keyframes[k + 1]) ++k;
    if (int(i) == keyframes[k]) {
      out[i] = kf_cots[k];
      continue;
    }
    std::string phase = cot_phase(kf_cots[k], vocab);
    if (phase.empty()) fail("keyframe annotation lacks a subtask phase");
    ObsView v = parse_obs(traj.frames[i].obs);
    Cell obj = target_cell(v, traj.task.object_name);
    out[i] = cot_template(vocab, v.gripper, traj.task.object_name, obj, phase);
  }
  return out;
}

SchemaCheck validate_schema(const std::vector<int>& cot, int max_cot_len) {
  SchemaCheck c;
  auto reject = [&](const std::string& reason) {
    c.ok = false;
    c.reason = reason;
    return c;
  };
  if (cot.empty()) return reject("empty");
  if (int(cot.size()) > max_cot_len) return reject("too-long");
  int opens = 0, closes = 0;
  for (int t : cot) {
    opens += t == VocabSpec::THINK_OPEN;
    closes += t == VocabSpec::THINK_CLOSE;
  }
  if (opens > 1 || closes > 1) return reject("duplicate-delimiter");
  if (cot.front() != VocabSpec::THINK_OPEN) return reject("missing-open");
  if (cot.back() != VocabSpec::THINK_CLOSE) return reject("missing-close");
  return c;
}

std::vector<CotRecord> check_temporal_consistency(const std::vector<CotRecord>& records,
                                                  const VocabSpec& vocab,
                                                  ConsistencyReport* report) {
  std::vector<CotRecord> kept;
  int best = -1;
  for (const CotRecord& r : records) {
    int rank = phase_rank(cot_phase(r.cot_tokens, vocab));
    if (rank < best) {
      if (report) report->dropped_frames.push_back(r.frame_idx);
      continue;
    }
    best = std::max(best, rank);
    kept.push_back(r);
  }
  return kept;
}

VocabSpec suite_vocab(const TaskSuite& suite, int action_bins) {
  return VocabSpec::build(suite.word_list(), action_bins);
}

std::vector<int> prefix_tokens(const WorldState& state, const TaskSpec& task,
                               const VocabSpec& vocab) {
  std::vector<int> ids = {VocabSpec::BOS};
  for (const std::string& w : obs_tokens(state)) ids.push_back(vocab.word_id(w));
  for (const std::string& w : task.instruction) ids.push_back(vocab.word_id(w));
  return ids;
}

DatasetManifest build_dataset(const TaskSuite& suite, const DataGenConfig& cfg,
                              const std::string& dataset_path, const std::string& manifest_path) {
  if (suite.tasks.empty()) fail("suite has no tasks");
  if (cfg.d != 3) fail("grid actions are 3-dimensional");
  VocabSpec vocab = suite_vocab(suite, cfg.action_bins);

  std::ofstream out(dataset_path);
  if (!out) fail("cannot write dataset file " + dataset_path);

  DatasetManifest m;
  m.demos_requested = cfg.n_demos;
  m.seed = cfg.seed;

  for (int demo = 0; demo < cfg.n_demos; ++demo) {
    const TaskSuite::TaskDef& def = suite.tasks[size_t(demo) % suite.tasks.size()];
    TaskSpec task = suite.task(def.id);
    uint64_t demo_seed = mix_seed(cfg.seed, 0xdeca5ULL, uint64_t(demo));
    DemoTrajectory traj = collect_demo(suite, task, demo_seed, cfg.h);
    if (!traj.success) {
      m.expert_failures += 1;
      continue;
    }
    m.demos_used += 1;
    m.frames += int(traj.frames.size());

    std::vector<int> kf = extract_keyframes(traj);
    std::vector<std::vector<int>> kf_cots;
    for (int idx : kf) kf_cots.push_back(annotate_keyframe(traj, idx, vocab));
    std::vector<std::vector<int>> cots = propagate_annotations(traj, kf, kf_cots, vocab);

    std::vector<int> instr;
    for (const std::string& w : task.instruction) instr.push_back(vocab.word_id(w));

    std::vector<CotRecord> records;
    for (size_t i = 0; i < traj.frames.size(); ++i) {
      SchemaCheck sc = validate_schema(cots[i], cfg.max_cot_len);
      if (!sc.ok) {
        m.schema_drops += 1;
        continue;
      }
      CotRecord r;
      r.task_id = task.id;
      r.frame_idx = int(i);
      for (const std::string& w : traj.frames[i].obs) r.obs_tokens.push_back(vocab.word_id(w));
      r.instr_tokens = instr;
      r.cot_tokens = cots[i];
      for (int bin : tokenize_actions(traj.frames[i].action_values, cfg.action_bins))
        r.action_tokens.push_back(vocab.action_token(bin));
      r.source = std::find(kf.begin(), kf.end(), int(i)) != kf.end() ? "keyframe" : "propagated";
      records.push_back(std::move(r));
    }

    ConsistencyReport cr;
    records = check_temporal_consistency(records, vocab, &cr);
    m.consistency_drops += int(cr.dropped_frames.size());

    for (const CotRecord& r : records) {
      m.keyframe_records += r.source == "keyframe";
      m.propagated_records += r.source == "propagated";
      nlohmann::json j;
      j["task_id"] = r.task_id;
      j["frame_idx"] = r.frame_idx;
      j["obs_tokens"] = r.obs_tokens;
      j["instr_tokens"] = r.instr_tokens;
      j["cot_tokens"] = r.cot_tokens;
      j["action_tokens"] = r.action_tokens;
      j["source"] = r.source;
      out << j.dump() << "\n";
    }
  }

  std::string canon = "n_demos=" + std::to_string(cfg.n_demos) + ";seed=" +
                      std::to_string(cfg.seed) + ";h=" + std::to_string(cfg.h) + ";d=" +
                      std::to_string(cfg.d) + ";bins=" + std::to_string(cfg.action_bins) +
                      ";max_cot_len=" + std::to_string(cfg.max_cot_len);
  m.config_hash = hex16(fnv1a64(canon));

  nlohmann::json mj;
  mj["demos_requested"] = m.demos_requested;
  mj["demos_used"] = m.demos_used;
  mj["expert_failures"] = m.expert_failures;
  mj["frames"] = m.frames;
  mj["keyframe_records"] = m.keyframe_records;
  mj["propagated_records"] = m.propagated_records;
  mj["schema_drops"] = m.schema_drops;
  mj["consistency_drops"] = m.consistency_drops;
  mj["seed"] = m.seed;
  mj["config_hash"] = m.config_hash;
  std::ofstream mout(manifest_path);
  if (!mout) fail("cannot write manifest file " + manifest_path);
  mout << mj.dump(2) << "\n";
  return m;
}

std::vector<CotRecord> load_dataset(const std::string& dataset_path) {
  std::ifstream in(dataset_path);
  if (!in) fail("cannot read dataset file " + dataset_path);
  std::vector<CotRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    CotRecord r;
    r.task_id = j.at("task_id").get<int>();
    r.frame_idx = j.at("frame_idx").get<int>();
    r.obs_tokens = j.at("obs_tokens").get<std::vector<int>>();
    r.instr_tokens = j.at("instr_tokens").get<std::vector<int>>();
    r.cot_tokens = j.at("cot_tokens").get<std::vector<int>>();
    r.action_tokens = j.at("action_tokens").get<std::vector<int>>();
    r.source = j.at("source").get<std::string>();
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace gridmind
