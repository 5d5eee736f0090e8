#pragma once

#include <gridmind/actions.hpp>
#include <gridmind/rng.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace gridmind {

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

struct ZoneRect {
  std::string name;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive corners
  bool contains(Cell c) const { return c.x >= x0 && c.x <= x1 && c.y >= y0 && c.y <= y1; }
  bool operator==(const ZoneRect&) const = default;
};

struct ObjectState {
  std::string name;
  Cell cell;
  bool operator==(const ObjectState&) const = default;
};

struct GripperState {
  Cell cell;
  bool open = true;
  int held = -1;  // object index, -1 when empty
  bool operator==(const GripperState&) const = default;
};

// objects[0] is always the task's target object
struct WorldState {
  int width = 7;
  int height = 7;
  std::vector<ObjectState> objects;
  ZoneRect target_zone;
  GripperState gripper;
  int step_count = 0;
  bool operator==(const WorldState&) const = default;
};

struct TaskSpec {
  int id = 0;
  std::string object_name;
  std::string zone_name;
  std::vector<std::string> instruction;  // "move" <object> "to" <zone>
  std::vector<std::string> distractor_names;
  int max_steps = 60;
};

struct StepResult {
  std::vector<std::string> observation;
  bool done = false;
  bool success = false;
};

struct TaskSuite {
  struct TaskDef {
    int id = 0;
    std::string object;
    std::string zone;
    int distractors = 0;
  };

  int width = 7;
  int height = 7;
  std::vector<std::string> object_names;
  std::vector<ZoneRect> zones;
  std::vector<TaskDef> tasks;
  int max_steps = 60;

  static TaskSuite default_suite();
  static TaskSuite distractor_suite();
  static TaskSuite load(const std::string& path);
  void save(const std::string& path) const;

  TaskSpec task(int id) const;
  const ZoneRect& zone(const std::string& name) const;
  // every word any observation, instruction, or reasoning line can use, fixed order
  std::vector<std::string> word_list() const;
};

// target object placed outside the zone, distractors on free non-zone cells;
// retries with sub-seeds, throws after 100 failed attempts
WorldState reset(const TaskSuite& suite, const TaskSpec& task, uint64_t seed);

std::vector<std::string> obs_tokens(const WorldState& state);

// one primitive: axis moves for |v| > 1/3 (blocked at walls per axis),
// then grip >1/3 closes / <-1/3 opens; drop onto an occupied cell is refused
struct PrimitiveResult {
  bool done = false;
  bool success = false;
};
PrimitiveResult step_primitive(WorldState& state, const std::array<double, 3>& action,
                               int max_steps);

// h primitives with early exit on success or step budget
StepResult step_chunk(WorldState& state, const ActionChunk& chunk, int max_steps);

bool task_success(const WorldState& state);

// greedy navigate-grasp-navigate-release policy; pure moves and pure grips
std::array<double, 3> expert_action(const WorldState& state);
ActionChunk expert_chunk(const WorldState& state, int h, int max_steps);

std::string ascii_render(const WorldState& state);

}  // namespace gridmind
