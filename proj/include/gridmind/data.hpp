#pragma once

#include <gridmind/env.hpp>
#include <gridmind/model.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace gridmind {

// one frame per primitive step: state before the action, then the next
// h primitives as chunk values (zero-padded past the episode end)
struct DemoFrame {
  std::vector<std::string> obs;
  bool gripper_open = true;
  std::vector<double> action_values;
};

struct DemoTrajectory {
  TaskSpec task;
  uint64_t seed = 0;
  std::vector<DemoFrame> frames;
  bool success = false;
};

struct CotRecord {
  int task_id = 0;
  int frame_idx = 0;
  std::vector<int> obs_tokens;
  std::vector<int> instr_tokens;
  std::vector<int> cot_tokens;
  std::vector<int> action_tokens;
  std::string source;  // "keyframe" or "propagated"
};

struct SchemaCheck {
  bool ok = true;
  std::string reason;
};

struct ConsistencyReport {
  std::vector<int> dropped_frames;
};

struct DataGenConfig {
  int n_demos = 100;
  uint64_t seed = 0;
  int h = 5;
  int d = 3;
  int action_bins = 256;
  int max_cot_len = 16;
};

struct DatasetManifest {
  int demos_requested = 0;
  int demos_used = 0;
  int expert_failures = 0;
  int frames = 0;
  int keyframe_records = 0;
  int propagated_records = 0;
  int schema_drops = 0;
  int consistency_drops = 0;
  uint64_t seed = 0;
  std::string config_hash;
};

// runs the expert to success and appends two zero-action terminal frames
// so the post-release state is part of the demonstration
DemoTrajectory collect_demo(const TaskSuite& suite, const TaskSpec& task, uint64_t seed, int h);

// index 0, every gripper change, and the last index; sorted unique
std::vector<int> extract_keyframes(const DemoTrajectory& traj);

// phase ordering for temporal filtering; unknown words rank last
int phase_rank(const std::string& phase);

// reasoning line from ground truth:
// <think> gripper at (x,y) ; <obj> at (u,v) ; subtask <phase> </think>
std::vector<int> annotate_keyframe(const DemoTrajectory& traj, int index, const VocabSpec& vocab);

// every frame gets the preceding keyframe's subtask with its own positions
std::vector<std::vector<int>> propagate_annotations(const DemoTrajectory& traj,
                                                    const std::vector<int>& keyframes,
                                                    const std::vector<std::vector<int>>& kf_cots,
                                                    const VocabSpec& vocab);

SchemaCheck validate_schema(const std::vector<int>& cot, int max_cot_len);

// drops records whose phase precedes an earlier frame's phase
std::vector<CotRecord> check_temporal_consistency(const std::vector<CotRecord>& records,
                                                  const VocabSpec& vocab,
                                                  ConsistencyReport* report = nullptr);

VocabSpec suite_vocab(const TaskSuite& suite, int action_bins);

// BOS + tokenized observation + instruction, the model's conditioning block
std::vector<int> prefix_tokens(const WorldState& state, const TaskSpec& task,
                               const VocabSpec& vocab);

DatasetManifest build_dataset(const TaskSuite& suite, const DataGenConfig& cfg,
                              const std::string& dataset_path, const std::string& manifest_path);

std::vector<CotRecord> load_dataset(const std::string& dataset_path);

}  // namespace gridmind
