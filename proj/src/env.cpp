#include <gridmind/env.hpp>

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

namespace gridmind {

namespace {

constexpr double kThreshold = 1.0 / 3.0;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("env: " + msg); }

int object_at(const WorldState& s, Cell c, int exclude = -1) {
  for (int i = 0; i < int(s.objects.size()); ++i)
    if (i != exclude && s.objects[size_t(i)].cell == c) return i;
  return -1;
}

int axis_step(double v) { return v > kThreshold ? 1 : (v < -kThreshold ? -1 : 0); }

}  // namespace

TaskSuite TaskSuite::default_suite() {
  TaskSuite s;
  s.object_names = {"block", "ball", "cup", "ring", "star"};
  s.zones = {{"nw", 0, 0, 1, 1}, {"ne", 5, 0, 6, 1}, {"sw", 0, 5, 1, 6}, {"se", 5, 5, 6, 6}};
  const char* objs[10] = {"block", "ball", "cup", "ring", "star",
                          "block", "ball", "cup", "ring", "star"};
  const char* zs[10] = {"nw", "ne", "sw", "se", "nw", "se", "sw", "ne", "nw", "se"};
  for (int i = 0; i < 10; ++i) s.tasks.push_back({i, objs[i], zs[i], 0});
  return s;
}

TaskSuite TaskSuite::distractor_suite() {
  TaskSuite s = default_suite();
  for (auto& t : s.tasks) t.distractors = 1;
  return s;
}

const ZoneRect& TaskSuite::zone(const std::string& name) const {
  for (const ZoneRect& z : zones)
    if (z.name == name) return z;
  fail("unknown zone " + name);
}

TaskSpec TaskSuite::task(int id) const {
  for (const TaskDef& t : tasks) {
    if (t.id != id) continue;
    TaskSpec spec;
    spec.id = t.id;
    spec.object_name = t.object;
    spec.zone_name = t.zone;
    spec.instruction = {"move", t.object, "to", t.zone};
    spec.max_steps = max_steps;
    for (const std::string& name : object_names) {
      if (int(spec.distractor_names.size()) >= t.distractors) break;
      if (name != t.object) spec.distractor_names.push_back(name);
    }
    if (int(spec.distractor_names.size()) < t.distractors)
      fail("task " + std::to_string(id) + " wants more distractors than object names allow");
    return spec;
  }
  fail("unknown task id " + std::to_string(id));
}

std::vector<std::string> TaskSuite::word_list() const {
  std::vector<std::string> w;
  int coord_max = std::max(width, height);
  for (int i = 0; i < coord_max; ++i) w.push_back(std::to_string(i));
  for (const char* fixed : {"grip", "open", "closed", "zone", "move", "to", "gripper", "at", ";",
                            "subtask", "approach", "grasp", "transport", "release", "finish"})
    w.push_back(fixed);
  for (const std::string& name : object_names) w.push_back(name);
  for (const ZoneRect& z : zones) w.push_back(z.name);
  return w;
}

void TaskSuite::save(const std::string& path) const {
  nlohmann::json j;
  j["width"] = width;
  j["height"] = height;
  j["objects"] = object_names;
  j["max_steps"] = max_steps;
  for (const ZoneRect& z : zones)
    j["zones"].push_back({{"name", z.name}, {"x0", z.x0}, {"y0", z.y0}, {"x1", z.x1}, {"y1", z.y1}});
  for (const TaskDef& t : tasks)
    j["tasks"].push_back(
        {{"id", t.id}, {"object", t.object}, {"zone", t.zone}, {"distractors", t.distractors}});
  std::ofstream out(path);
  if (!out) fail("cannot write suite file " + path);
  out << j.dump(2) << "\n";
}

TaskSuite TaskSuite::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read suite file " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  TaskSuite s;
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.object_names = j.at("objects").get<std::vector<std::string>>();
  s.max_steps = j.at("max_steps").get<int>();
  for (const auto& z : j.at("zones"))
    s.zones.push_back({z.at("name").get<std::string>(), z.at("x0").get<int>(),
                       z.at("y0").get<int>(), z.at("x1").get<int>(), z.at("y1").get<int>()});
  for (const auto& t : j.at("tasks"))
    s.tasks.push_back({t.at("id").get<int>(), t.at("object").get<std::string>(),
                       t.at("zone").get<std::string>(), t.at("distractors").get<int>()});
  return s;
}

WorldState reset(const TaskSuite& suite, const TaskSpec& task, uint64_t seed) {
  const ZoneRect& zone = suite.zone(task.zone_name);
  for (uint64_t attempt = 0; attempt < 100; ++attempt) {
    Rng rng(mix_seed(seed, uint64_t(task.id), attempt));
    WorldState s;
    s.width = suite.width;
    s.height = suite.height;
    s.target_zone = zone;
    s.gripper.cell = {rng.uniform_int(s.width), rng.uniform_int(s.height)};
    s.gripper.open = true;
    s.gripper.held = -1;

    Cell target{rng.uniform_int(s.width), rng.uniform_int(s.height)};
    if (zone.contains(target)) continue;
    s.objects.push_back({task.object_name, target});

    bool ok = true;
    for (const std::string& name : task.distractor_names) {
      Cell c{rng.uniform_int(s.width), rng.uniform_int(s.height)};
      if (zone.contains(c) || object_at(s, c) >= 0) {
        ok = false;
        break;
      }
      s.objects.push_back({name, c});
    }
    if (ok) return s;
  }
  throw std::runtime_error("env: no valid placement for task " + std::to_string(task.id) +
                           " seed " + std::to_string(seed) + " after 100 attempts");
}

std::vector<std::string> obs_tokens(const WorldState& s) {
  std::vector<std::string> t;
  t.push_back("grip");
  t.push_back(std::to_string(s.gripper.cell.x));
  t.push_back(std::to_string(s.gripper.cell.y));
  t.push_back(s.gripper.open ? "open" : "closed");
  for (const ObjectState& o : s.objects) {
    t.push_back(o.name);
    t.push_back(std::to_string(o.cell.x));
    t.push_back(std::to_string(o.cell.y));
  }
  t.push_back("zone");
  t.push_back(s.target_zone.name);
  t.push_back(std::to_string(s.target_zone.x0));
  t.push_back(std::to_string(s.target_zone.y0));
  t.push_back(std::to_string(s.target_zone.x1));
  t.push_back(std::to_string(s.target_zone.y1));
  return t;
}

bool task_success(const WorldState& s) {
  return !s.objects.empty() && s.target_zone.contains(s.objects[0].cell) && s.gripper.held != 0;
}

PrimitiveResult step_primitive(WorldState& s, const std::array<double, 3>& a, int max_steps) {
  int mx = axis_step(a[0]), my = axis_step(a[1]);
  int nx = s.gripper.cell.x + mx, ny = s.gripper.cell.y + my;
  if (nx >= 0 && nx < s.width) s.gripper.cell.x = nx;
  if (ny >= 0 && ny < s.height) s.gripper.cell.y = ny;
  if (s.gripper.held >= 0) s.objects[size_t(s.gripper.held)].cell = s.gripper.cell;

  if (a[2] > kThreshold && s.gripper.open) {
    s.gripper.open = false;
    s.gripper.held = object_at(s, s.gripper.cell);
  } else if (a[2] < -kThreshold && !s.gripper.open) {
    // a drop onto a cell another object occupies is refused outright
    if (s.gripper.held < 0 || object_at(s, s.gripper.cell, s.gripper.held) < 0) {
      s.gripper.open = true;
      s.gripper.held = -1;
    }
  }

  s.step_count += 1;
  PrimitiveResult r;
  r.success = task_success(s);
  r.done = r.success || s.step_count >= max_steps;
  return r;
}

StepResult step_chunk(WorldState& s, const ActionChunk& chunk, int max_steps) {
  StepResult out;
  for (int i = 0; i < chunk.h; ++i) {
    std::array<double, 3> a{chunk.value(i, 0), chunk.value(i, 1), chunk.value(i, 2)};
    PrimitiveResult r = step_primitive(s, a, max_steps);
    out.done = r.done;
    out.success = r.success;
    if (r.done) break;
  }
  out.observation = obs_tokens(s);
  return out;
}

std::array<double, 3> expert_action(const WorldState& s) {
  const double kGo = 0.9;
  if (s.objects.empty()) throw std::runtime_error("env: expert needs a target object");
  if (task_success(s)) return {0.0, 0.0, 0.0};

  if (s.gripper.held != 0) {
    if (s.gripper.held >= 0) return {0.0, 0.0, -kGo};  // shed a wrongly held object
    Cell goal = s.objects[0].cell;
    Cell g = s.gripper.cell;
    if (g.x != goal.x) return {g.x < goal.x ? kGo : -kGo, 0.0, 0.0};
    if (g.y != goal.y) return {0.0, g.y < goal.y ? kGo : -kGo, 0.0};
    if (!s.gripper.open) return {0.0, 0.0, -kGo};  // free a jammed gripper before grasping
    return {0.0, 0.0, kGo};
  }

  Cell drop{-1, -1};
  for (int y = s.target_zone.y0; y <= s.target_zone.y1 && drop.x < 0; ++y)
    for (int x = s.target_zone.x0; x <= s.target_zone.x1; ++x)
      if (object_at(s, {x, y}, 0) < 0) {
        drop = {x, y};
        break;
      }
  if (drop.x < 0) throw std::runtime_error("env: expert found no free cell in the target zone");
  Cell g = s.gripper.cell;
  if (g.x != drop.x) return {g.x < drop.x ? kGo : -kGo, 0.0, 0.0};
  if (g.y != drop.y) return {0.0, g.y < drop.y ? kGo : -kGo, 0.0};
  return {0.0, 0.0, -kGo};
}

ActionChunk expert_chunk(const WorldState& state, int h, int max_steps) {
  WorldState sim = state;
  ActionChunk chunk = chunk_from_values(h, 3, std::vector<double>(size_t(h) * 3, 0.0));
  bool done = task_success(sim) || sim.step_count >= max_steps;
  for (int i = 0; i < h && !done; ++i) {
    std::array<double, 3> a = expert_action(sim);
    for (int j = 0; j < 3; ++j) chunk.values[size_t(i) * 3 + size_t(j)] = a[size_t(j)];
    done = step_primitive(sim, a, max_steps).done;
  }
  return chunk;
}

std::string ascii_render(const WorldState& s) {
  std::string out;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      Cell c{x, y};
      char ch = s.target_zone.contains(c) ? '~' : '.';
      int oi = object_at(s, c);
      if (oi == 0)
        ch = char(std::toupper(s.objects[size_t(oi)].name[0]));
      else if (oi > 0)
        ch = s.objects[size_t(oi)].name[0];
      if (s.gripper.cell == c) ch = s.gripper.open ? 'g' : 'G';
      out += ch;
    }
    out += '\n';
  }
  return out;
}

}  // namespace gridmind
