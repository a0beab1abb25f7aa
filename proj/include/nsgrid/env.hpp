#pragma once

// ManipGrid: a deterministic, instruction-conditioned grid manipulation
// environment. A gripper with continuous (x, y) position, a lift axis and a
// binary grip moves over a WxW board of objects, containers and devices.
//
// Dynamics, in order, per step:
//   1. position += (dx, dy), at most one cell per axis, clamped to the board;
//      lift += 0.5 * dlift, clamped to [0, 1].
//   2. grip > 0.5 closes the gripper and fires an "act" event at the cell
//      under it: pick an object (lift low), else toggle a container's door,
//      else toggle a device -- all requiring lift < 0.3.
//   3. grip < -0.5 opens the gripper: while holding, deposits onto the cell
//      or into an open container under it; a closed container refuses the
//      deposit (no-op). Objects inside containers are not retrievable.
//
// Invalid physical actions are no-ops. Task reward is +1 the first time each
// goal predicate becomes true (latched). Episodes end when every predicate
// has latched or after T_max = 40 * M steps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsgrid/catalog.hpp"
#include "nsgrid/plan.hpp"
#include "nsgrid/rng.hpp"

namespace nsgrid {

struct ActionVec {
  double dx = 0.0, dy = 0.0, dlift = 0.0, grip = 0.0;

  ActionVec clipped() const {
    auto c = [](double v) { return std::min(1.0, std::max(-1.0, v)); };
    return {c(dx), c(dy), c(dlift), c(grip)};
  }
  std::array<double, 4> to_array() const { return {dx, dy, dlift, grip}; }
  static ActionVec from_array(const std::array<double, 4>& a) {
    return {a[0], a[1], a[2], a[3]};
  }
};

inline constexpr int kActionDim = 4;
inline constexpr int kProprioDim = 5;
inline constexpr double kLiftRate = 0.5;
inline constexpr double kLiftLow = 0.3;
inline constexpr int kTMaxPerPrimitive = 40;

struct EntityState {
  std::size_t cat = 0;       // catalog index
  int cx = -1, cy = -1;      // board cell; (-1,-1) while held
  bool open_or_on = false;   // containers: door open; devices: powered
  int in_container = -1;     // index into WorldState::entities, -1 if none
  bool held = false;
};

struct GripperState {
  double x = 0.0, y = 0.0;
  double lift = 0.0;
  bool closed = false;
  int held = -1;  // entity index or -1
};

struct WorldState {
  int width = 8;
  std::vector<EntityState> entities;
  GripperState gripper;
  int step_count = 0;

  int cell_x() const { return static_cast<int>(std::lround(gripper.x)); }
  int cell_y() const { return static_cast<int>(std::lround(gripper.y)); }

  int find_entity(const std::string& id) const {
    for (std::size_t i = 0; i < entities.size(); ++i)
      if (catalog()[entities[i].cat].id == id) return static_cast<int>(i);
    return -1;
  }
};

struct Observation {
  int width = 8;
  std::vector<int> cells;                    // W*W content codes, row-major
  std::array<double, kProprioDim> proprio{};  // x, y, lift, closed, held in [0,1]

  bool operator==(const Observation& o) const {
    return width == o.width && cells == o.cells && proprio == o.proprio;
  }
};

struct Task {
  std::string instruction;
  Plan plan;  // goal list: one predicate per primitive
  std::uint64_t seed = 0;
  int extra_distractors = 0;
};

struct EnvParams {
  int width = 8;
  int min_objects = 3;
};

// ---------------------------------------------------------------------------
// rendering and goal predicates (pure functions of WorldState)
// ---------------------------------------------------------------------------

namespace detail {

inline int cell_code_of(const WorldState& w, int cx, int cy) {
  // Highest-priority occupant wins: later catalog entries (containers,
  // devices) are overdrawn by objects resting on the same cell.
  int best = 0, best_rank = -1;
  for (const auto& e : w.entities) {
    if (e.held || e.in_container >= 0 || e.cx != cx || e.cy != cy) continue;
    const auto& def = catalog()[e.cat];
    const int rank =
        (def.role == EntityRole::kObject || def.role == EntityRole::kSupport)
            ? 1000 + static_cast<int>(e.cat)
            : static_cast<int>(e.cat);
    if (rank > best_rank) {
      best_rank = rank;
      int code = entity_code_base(e.cat);
      if (def.role == EntityRole::kContainer || def.role == EntityRole::kDevice)
        code += e.open_or_on ? 1 : 0;
      best = code;
    }
  }
  return best;
}

inline bool parse_relation(const std::string& support, std::string* rel,
                           std::string* anchor) {
  const auto colon = support.find(':');
  if (colon == std::string::npos) return false;
  *rel = support.substr(0, colon);
  *anchor = support.substr(colon + 1);
  return *rel == "left_of" || *rel == "right_of";
}

inline std::pair<int, int> relation_offset(const std::string& rel) {
  if (rel == "left_of") return {-1, 0};
  return {1, 0};  // right_of
}

}  // namespace detail

inline Observation render(const WorldState& w) {
  Observation obs;
  obs.width = w.width;
  obs.cells.resize(static_cast<std::size_t>(w.width) * w.width);
  for (int y = 0; y < w.width; ++y)
    for (int x = 0; x < w.width; ++x)
      obs.cells[static_cast<std::size_t>(y) * w.width + x] =
          detail::cell_code_of(w, x, y);
  const double denom = static_cast<double>(w.width - 1);
  obs.proprio = {w.gripper.x / denom, w.gripper.y / denom, w.gripper.lift,
                 w.gripper.closed ? 1.0 : 0.0, w.gripper.held >= 0 ? 1.0 : 0.0};
  return obs;
}

// Current truth value of each goal predicate (no latching).
inline std::vector<bool> goal_check(const WorldState& w, const Plan& plan) {
  std::vector<bool> out;
  out.reserve(plan.primitives.size());
  for (const auto& p : plan.primitives) {
    bool ok = false;
    const int obj = w.find_entity(p.object);
    switch (p.op) {
      case PrimitiveOp::kPick:
        ok = obj >= 0 && w.entities[obj].held;
        break;
      case PrimitiveOp::kPlaceOn: {
        const int sup = w.find_entity(p.support);
        ok = obj >= 0 && sup >= 0 && !w.entities[obj].held &&
             w.entities[obj].in_container < 0 &&
             w.entities[obj].cx == w.entities[sup].cx &&
             w.entities[obj].cy == w.entities[sup].cy;
        break;
      }
      case PrimitiveOp::kPlaceIn: {
        const int sup = w.find_entity(p.support);
        ok = obj >= 0 && sup >= 0 && w.entities[obj].in_container == sup;
        break;
      }
      case PrimitiveOp::kPlaceRel: {
        std::string rel, anchor;
        if (!detail::parse_relation(p.support, &rel, &anchor)) break;
        const int sup = w.find_entity(anchor);
        if (obj < 0 || sup < 0) break;
        const auto [ox, oy] = detail::relation_offset(rel);
        ok = !w.entities[obj].held && w.entities[obj].in_container < 0 &&
             w.entities[obj].cx == w.entities[sup].cx + ox &&
             w.entities[obj].cy == w.entities[sup].cy + oy;
        break;
      }
      case PrimitiveOp::kOpen:
        ok = obj >= 0 && w.entities[obj].open_or_on;
        break;
      case PrimitiveOp::kClose:
        ok = obj >= 0 && !w.entities[obj].open_or_on;
        break;
      case PrimitiveOp::kTurnOn:
        ok = obj >= 0 && w.entities[obj].open_or_on;
        break;
      case PrimitiveOp::kTurnOff:
        ok = obj >= 0 && !w.entities[obj].open_or_on;
        break;
      case PrimitiveOp::kPad:
        ok = false;
        break;
    }
    out.push_back(ok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// task construction
// ---------------------------------------------------------------------------

inline Task make_task(const std::string& instruction, std::uint64_t seed,
                      int extra_distractors = 0) {
  Task task;
  task.instruction = instruction;
  task.plan = parse_instruction(instruction);  // throws ParseError
  task.seed = seed;
  task.extra_distractors = extra_distractors;
  return task;
}

// Bounded enumeration of the single-clause grammar plus a few curated
// composites; drives the expert-completeness gate.
inline std::vector<std::string> enumerate_grammar_instructions() {
  std::vector<std::string> out;
  std::vector<std::string> objects, supports, containers, devices;
  for (const auto& e : catalog()) {
    switch (e.role) {
      case EntityRole::kObject: objects.push_back(e.id); break;
      case EntityRole::kSupport: supports.push_back(e.id); break;
      case EntityRole::kContainer: containers.push_back(e.id); break;
      case EntityRole::kDevice: devices.push_back(e.id); break;
    }
  }
  auto surface = [](std::string id) {
    std::replace(id.begin(), id.end(), '_', ' ');
    return id;
  };
  for (const auto& x : objects) {
    for (const auto& y : containers)
      out.push_back("put the " + surface(x) + " in the " + surface(y));
    for (const auto& y : supports)
      out.push_back("place the " + surface(x) + " on the " + surface(y));
    for (const auto& y : devices)
      out.push_back("place the " + surface(x) + " on the " + surface(y));
  }
  for (const auto& x : objects)
    for (const char* rel : {"left of", "right of"})
      out.push_back("place the " + surface(x) + " " + rel + " the plate");
  for (const auto& y : containers) {
    if (!find_entity(y)) continue;
    out.push_back("open the " + surface(y));
    out.push_back("close the " + surface(y));
  }
  for (const auto& y : devices) {
    out.push_back("turn on the " + surface(y));
    out.push_back("turn off the " + surface(y));
  }
  out.push_back("open the microwave and put the white mug in the microwave");
  out.push_back("turn on the stove and place the moka pot on the stove");
  out.push_back(
      "place the white mug on the left plate and "
      "put the alphabet soup in the basket");
  out.push_back(
      "place the white mug on the left plate and "
      "place the yellow and white mug on the right plate");
  return out;
}

// ---------------------------------------------------------------------------
// the environment
// ---------------------------------------------------------------------------

class ManipGrid {
 public:
  explicit ManipGrid(EnvParams params = {}) : params_(params) {}

  struct StepResult {
    Observation obs;
    double r_task = 0.0;
    bool done = false;
  };

  Observation reset(const Task& task) {
    task_ = task;
    world_ = build_layout(task, params_);
    latched_.assign(task.plan.primitives.size(), false);
    done_ = false;
    t_max_ = kTMaxPerPrimitive * task.plan.length();
    return render(world_);
  }

  StepResult step(const ActionVec& raw) {
    if (done_) throw std::logic_error("ManipGrid::step: episode is done");
    const ActionVec a = raw.clipped();
    auto& g = world_.gripper;
    const double hi = static_cast<double>(world_.width - 1);
    g.x = std::min(hi, std::max(0.0, g.x + a.dx));
    g.y = std::min(hi, std::max(0.0, g.y + a.dy));
    g.lift = std::min(1.0, std::max(0.0, g.lift + kLiftRate * a.dlift));

    if (a.grip > 0.5)
      act_event();
    else if (a.grip < -0.5)
      release_event();

    ++world_.step_count;

    StepResult res;
    const auto truth = goal_check(world_, task_.plan);
    for (std::size_t k = 0; k < truth.size(); ++k) {
      if (truth[k] && !latched_[k]) {
        latched_[k] = true;
        res.r_task += 1.0;
      }
    }
    const bool all = std::all_of(latched_.begin(), latched_.end(),
                                 [](bool b) { return b; });
    done_ = all || world_.step_count >= t_max_;
    res.done = done_;
    res.obs = render(world_);
    return res;
  }

  const WorldState& world() const { return world_; }
  const Task& task() const { return task_; }
  const std::vector<bool>& latched() const { return latched_; }
  bool done() const { return done_; }
  bool success() const {
    return std::all_of(latched_.begin(), latched_.end(),
                       [](bool b) { return b; });
  }
  int t_max() const { return t_max_; }

 private:
  void act_event() {
    auto& g = world_.gripper;
    g.closed = true;
    if (g.lift >= kLiftLow) return;
    const int cx = world_.cell_x(), cy = world_.cell_y();
    if (g.held < 0) {
      // Pick beats door/switch; lowest entity index breaks ties.
      for (std::size_t i = 0; i < world_.entities.size(); ++i) {
        auto& e = world_.entities[i];
        if (catalog()[e.cat].role != EntityRole::kObject) continue;
        if (e.held || e.in_container >= 0 || e.cx != cx || e.cy != cy)
          continue;
        e.held = true;
        e.cx = e.cy = -1;
        g.held = static_cast<int>(i);
        return;
      }
      for (auto& e : world_.entities) {
        const auto role = catalog()[e.cat].role;
        if ((role == EntityRole::kContainer || role == EntityRole::kDevice) &&
            e.cx == cx && e.cy == cy) {
          e.open_or_on = !e.open_or_on;
          return;
        }
      }
    }
  }

  void release_event() {
    auto& g = world_.gripper;
    if (g.held < 0) {
      g.closed = false;
      return;
    }
    const int cx = world_.cell_x(), cy = world_.cell_y();
    int container = -1;
    for (std::size_t i = 0; i < world_.entities.size(); ++i) {
      const auto& e = world_.entities[i];
      if (catalog()[e.cat].role == EntityRole::kContainer && e.cx == cx &&
          e.cy == cy) {
        container = static_cast<int>(i);
        break;
      }
    }
    auto& held = world_.entities[g.held];
    if (container >= 0) {
      if (!world_.entities[container].open_or_on) return;  // door shut: no-op
      held.in_container = container;
      held.cx = world_.entities[container].cx;
      held.cy = world_.entities[container].cy;
    } else {
      held.in_container = -1;
      held.cx = cx;
      held.cy = cy;
    }
    held.held = false;
    g.held = -1;
    g.closed = false;
  }

  static WorldState build_layout(const Task& task, const EnvParams& params) {
    WorldState w;
    w.width = params.width;
    Rng rng(task.seed);

    // Entities named by the plan, in first-mention order.
    std::vector<std::string> required;
    auto mention = [&required](const std::string& id) {
      if (id.empty()) return;
      if (std::find(required.begin(), required.end(), id) == required.end())
        required.push_back(id);
    };
    for (const auto& p : task.plan.primitives) {
      mention(p.object);
      std::string rel, anchor;
      if (p.op == PrimitiveOp::kPlaceRel &&
          detail::parse_relation(p.support, &rel, &anchor))
        mention(anchor);
      else
        mention(p.support);
    }

    int n_objects = 0;
    for (const auto& id : required) {
      const EntityDef* def = find_entity(id);
      if (!def) throw ParseError("unknown entity \"" + id + "\" in plan");
      if (def->role == EntityRole::kObject ||
          def->role == EntityRole::kSupport)
        ++n_objects;
    }

    // Distractor objects fill up to the configured minimum plus any
    // perturbation extras. Their identity is a function of the instruction
    // alone (layout seeds move positions, never the object set).
    std::vector<std::string> pool;
    for (const auto& e : catalog())
      if (e.role == EntityRole::kObject &&
          std::find(required.begin(), required.end(), e.id) == required.end())
        pool.push_back(e.id);
    int want = std::max(0, params.min_objects - n_objects) +
               task.extra_distractors;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : task.instruction) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    Rng distractor_rng(h);
    std::vector<std::string> ids = required;
    while (want > 0 && !pool.empty()) {
      const std::size_t j = distractor_rng.uniform_index(pool.size());
      ids.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
      --want;
    }

    // Initial door/switch state per goal preconditions: an open/close/turn
    // goal starts negated; a put-in target with no earlier "open" starts open.
    auto initial_flag = [&task](const std::string& id,
                                const EntityDef& def) -> bool {
      for (const auto& p : task.plan.primitives) {
        if (p.op == PrimitiveOp::kOpen && p.object == id) return false;
        if (p.op == PrimitiveOp::kClose && p.object == id) return true;
        if (p.op == PrimitiveOp::kTurnOn && p.object == id) return false;
        if (p.op == PrimitiveOp::kTurnOff && p.object == id) return true;
        if (p.op == PrimitiveOp::kPlaceIn && p.support == id) return true;
      }
      return def.starts_open;
    };

    // Relation anchors must keep the offset cell on the board.
    auto anchor_constraints = [&task](const std::string& id, int width,
                                      int cx) -> bool {
      for (const auto& p : task.plan.primitives) {
        std::string rel, anchor;
        if (p.op != PrimitiveOp::kPlaceRel ||
            !detail::parse_relation(p.support, &rel, &anchor) || anchor != id)
          continue;
        const int ox = detail::relation_offset(rel).first;
        if (cx + ox < 0 || cx + ox >= width) return false;
      }
      return true;
    };

    std::vector<std::pair<int, int>> taken = {{0, 0}};  // gripper home
    auto occupied = [&taken](int x, int y) {
      for (auto [tx, ty] : taken)
        if (tx == x && ty == y) return true;
      return false;
    };

    for (const auto& id : ids) {
      const EntityDef& def = *find_entity(id);
      EntityState e;
      e.cat = *catalog_index(id);
      for (int guard = 0; guard < 10000; ++guard) {
        const int x = static_cast<int>(rng.uniform_index(w.width));
        const int y = static_cast<int>(rng.uniform_index(w.width));
        if (occupied(x, y)) continue;
        if (!anchor_constraints(id, w.width, x)) continue;
        e.cx = x;
        e.cy = y;
        break;
      }
      if (e.cx < 0)
        throw std::runtime_error("layout generation failed for \"" + id + "\"");
      taken.emplace_back(e.cx, e.cy);
      if (def.role == EntityRole::kContainer || def.role == EntityRole::kDevice)
        e.open_or_on = initial_flag(id, def);
      w.entities.push_back(e);
    }

    // Every goal predicate must start unsatisfied. Distinct cells and the
    // flag rules above cover all but relation goals, where the object may
    // land on the anchor's offset cell by chance; re-draw it if so.
    for (const auto& p : task.plan.primitives) {
      std::string rel, anchor;
      if (p.op != PrimitiveOp::kPlaceRel ||
          !detail::parse_relation(p.support, &rel, &anchor))
        continue;
      const int obj = w.find_entity(p.object);
      const int anc = w.find_entity(anchor);
      if (obj < 0 || anc < 0) continue;
      const auto [ox, oy] = detail::relation_offset(rel);
      const int bad_x = w.entities[anc].cx + ox;
      const int bad_y = w.entities[anc].cy + oy;
      while (w.entities[obj].cx == bad_x && w.entities[obj].cy == bad_y) {
        const int x = static_cast<int>(rng.uniform_index(w.width));
        const int y = static_cast<int>(rng.uniform_index(w.width));
        if ((x == bad_x && y == bad_y) || occupied(x, y)) continue;
        w.entities[obj].cx = x;
        w.entities[obj].cy = y;
        taken.emplace_back(x, y);
      }
    }

    w.gripper = GripperState{};
    w.step_count = 0;
    return w;
  }

  EnvParams params_;
  Task task_;
  WorldState world_;
  std::vector<bool> latched_;
  bool done_ = true;
  int t_max_ = 0;
};

// ---------------------------------------------------------------------------
// scripted expert
// ---------------------------------------------------------------------------

struct ExpertAction {
  ActionVec action;
  int true_index = 1;  // 1-based plan index the action serves
  bool failed = false;
};

// Proportional controller toward the active primitive's target cell. The
// caller supplies the active index m (first unsatisfied goal); the emitted
// index equals m, so annotation traces are nondecreasing by construction.
inline ExpertAction scripted_expert(const WorldState& w, const Plan& plan,
                                    int m) {
  constexpr double kDeadband = 0.05;
  ExpertAction out;
  out.true_index = m;
  const Primitive& p = plan.at(m);

  double tx = 0.0, ty = 0.0;
  switch (p.op) {
    case PrimitiveOp::kPick: {
      const int obj = w.find_entity(p.object);
      if (obj < 0 || w.entities[obj].held || w.entities[obj].in_container >= 0) {
        out.failed = true;
        return out;
      }
      tx = w.entities[obj].cx;
      ty = w.entities[obj].cy;
      break;
    }
    case PrimitiveOp::kPlaceOn:
    case PrimitiveOp::kPlaceIn:
    case PrimitiveOp::kPlaceRel: {
      std::string rel, anchor = p.support;
      int ox = 0, oy = 0;
      if (p.op == PrimitiveOp::kPlaceRel) {
        if (!detail::parse_relation(p.support, &rel, &anchor)) {
          out.failed = true;
          return out;
        }
        std::tie(ox, oy) = detail::relation_offset(rel);
      }
      const int sup = w.find_entity(anchor);
      if (sup < 0) {
        out.failed = true;
        return out;
      }
      tx = w.entities[sup].cx + ox;
      ty = w.entities[sup].cy + oy;
      break;
    }
    case PrimitiveOp::kOpen:
    case PrimitiveOp::kClose:
    case PrimitiveOp::kTurnOn:
    case PrimitiveOp::kTurnOff: {
      const int tgt = w.find_entity(p.object);
      if (tgt < 0) {
        out.failed = true;
        return out;
      }
      tx = w.entities[tgt].cx;
      ty = w.entities[tgt].cy;
      break;
    }
    case PrimitiveOp::kPad:
      out.failed = true;  // pad never executes
      return out;
  }

  const auto& g = w.gripper;
  const double ex = tx - g.x, ey = ty - g.y;
  const bool at_target =
      std::abs(ex) < kDeadband && std::abs(ey) < kDeadband;
  auto clip1 = [](double v) { return std::min(1.0, std::max(-1.0, v)); };

  const bool carrying = p.op == PrimitiveOp::kPlaceOn ||
                        p.op == PrimitiveOp::kPlaceIn ||
                        p.op == PrimitiveOp::kPlaceRel;
  if (!at_target) {
    out.action.dx = clip1(ex);
    out.action.dy = clip1(ey);
    // Carry placed objects high; approach pick/toggle targets low.
    out.action.dlift = carrying ? (g.lift < 0.75 ? 1.0 : 0.0)
                                : (g.lift > 0.25 ? -1.0 : 0.0);
    return out;
  }
  if (carrying) {
    out.action.grip = -1.0;  // release: deposit
    return out;
  }
  if (g.lift >= kLiftLow) {
    out.action.dlift = -1.0;
    return out;
  }
  out.action.grip = 1.0;  // pick or toggle
  return out;
}

}  // namespace nsgrid
