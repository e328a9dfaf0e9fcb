#pragma once

// Object-collection grid world with heterogeneous agents.
//
// Coordinates: origin top-left, x rightward (columns), y downward (rows).
// The grid is split into four quadrants; the middle row/column of an odd grid
// belongs to the top/left quadrants:
//
//   Gamma (top-left)    | Delta (top-right)
//   --------------------+-------------------
//   Theta (bottom-left) | Lambda (bottom-right)
//
// Map text legend: '#' wall, '.' empty, 'B' start cell, 'g' star spawn,
// 'r' triangle spawn, 'b' spawn for both types.

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "da6/errors.hpp"
#include "da6/model.hpp"
#include "da6/tensor.hpp"

namespace da6::env {

enum class ObjectType : std::uint8_t { Star = 0, Triangle = 1 };
inline constexpr std::size_t kObjectTypes = 2;
inline constexpr std::array<const char*, kObjectTypes> kObjectNames = {"star", "triangle"};

enum Region : int { Gamma = 0, Delta = 1, Theta = 2, Lambda = 3 };
inline constexpr std::array<const char*, 4> kRegionNames = {"gamma", "delta", "theta", "lambda"};

inline constexpr std::size_t kLocalChannels = 5;
inline constexpr int kViewSize = 7;
inline constexpr int kViewRadius = kViewSize / 2;

enum LocalChannel : std::size_t { SelfChannel = 0, AgentChannel = 1, StarChannel = 2, TriangleChannel = 3, WallChannel = 4 };

enum class ConditionalKind : std::uint8_t { GPos, OPos };

inline std::string to_string(ConditionalKind k) { return k == ConditionalKind::GPos ? "g_pos" : "o_pos"; }

inline ConditionalKind parse_conditional_kind(const std::string& s) {
  if (s == "g_pos") return ConditionalKind::GPos;
  if (s == "o_pos") return ConditionalKind::OPos;
  throw ConfigError("unknown conditional state '" + s + "'");
}

inline std::size_t conditional_channels(ConditionalKind k) { return k == ConditionalKind::GPos ? 1 : 2; }

inline ObjectType parse_object_type(const std::string& s) {
  if (s == "star") return ObjectType::Star;
  if (s == "triangle") return ObjectType::Triangle;
  throw ConfigError("unknown object type '" + s + "'");
}

struct Position {
  int x = 0;
  int y = 0;
  bool operator==(const Position&) const = default;
};

// Assigned symbols and regions as bit masks (bit = ObjectType / Region index).
struct AgentSpec {
  char type = 'A';
  std::uint8_t symbols = 0;
  std::uint8_t regions = 0;

  bool assigned(ObjectType t, int region) const {
    return (symbols >> static_cast<int>(t) & 1) != 0 && (regions >> region & 1) != 0;
  }
  bool operator==(const AgentSpec&) const = default;
};

// Agent types of the collection game.
inline AgentSpec standard_agent(char type) {
  constexpr std::uint8_t star = 1, tri = 2, both = 3;
  switch (type) {
    case 'A': return {'A', star, (1 << Gamma) | (1 << Lambda)};
    case 'B': return {'B', tri, (1 << Delta) | (1 << Theta)};
    case 'C': return {'C', both, (1 << Gamma) | (1 << Delta)};
    case 'D': return {'D', both, (1 << Theta) | (1 << Lambda)};
    default: throw ConfigError(std::string("unknown agent type '") + type + "'");
  }
}

inline std::vector<AgentSpec> default_roster() {
  std::vector<AgentSpec> roster;
  for (char t : {'A', 'A', 'B', 'B', 'C', 'C', 'D', 'D'}) roster.push_back(standard_agent(t));
  return roster;
}

inline void to_json(nlohmann::json& j, const AgentSpec& a) {
  nlohmann::json symbols = nlohmann::json::array(), regions = nlohmann::json::array();
  for (std::size_t t = 0; t < kObjectTypes; ++t)
    if (a.symbols >> t & 1) symbols.push_back(kObjectNames[t]);
  for (int r = 0; r < 4; ++r)
    if (a.regions >> r & 1) regions.push_back(kRegionNames[r]);
  j = {{"type", std::string(1, a.type)}, {"symbols", symbols}, {"regions", regions}};
}

// Either {"type": "B"} for the standard assignment, or explicit symbols/regions.
inline void from_json(const nlohmann::json& j, AgentSpec& a) {
  const auto type = j.at("type").get<std::string>();
  if (type.size() != 1) throw ConfigError("agent type must be one character");
  if (!j.contains("symbols") && !j.contains("regions")) {
    a = standard_agent(type[0]);
    return;
  }
  a.type = type[0];
  a.symbols = 0;
  a.regions = 0;
  for (const auto& s : j.at("symbols")) a.symbols |= 1 << static_cast<int>(parse_object_type(s.get<std::string>()));
  for (const auto& r : j.at("regions")) {
    const auto name = r.get<std::string>();
    auto it = std::find(kRegionNames.begin(), kRegionNames.end(), name);
    if (it == kRegionNames.end()) throw ConfigError("unknown region '" + name + "'");
    a.regions |= 1 << static_cast<int>(it - kRegionNames.begin());
  }
}

struct EnvSpec {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> wall;   // per cell
  std::vector<std::uint8_t> spawn;  // per cell, bit t set if type t spawns there
  std::vector<int> start_cells;     // row-major order
  std::string map_text;             // canonical text, one '\n' after each row
  std::array<int, kObjectTypes> objects_per_type = {20, 20};
  std::vector<AgentSpec> roster = default_roster();
  int horizon = 200;
  double reward_object = 1.0;
  double reward_collision = -1.0;

  int cell(int x, int y) const { return y * width + x; }
  Position position(int cell_index) const { return {cell_index % width, cell_index / width}; }
  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool blocked(int x, int y) const { return !in_bounds(x, y) || wall[cell(x, y)] != 0; }
  std::size_t agent_count() const { return roster.size(); }

  int region(int x, int y) const {
    const bool top = y < (height + 1) / 2;
    const bool left = x < (width + 1) / 2;
    return top ? (left ? Gamma : Delta) : (left ? Theta : Lambda);
  }
};

inline EnvSpec load_map(const std::string& text) {
  std::vector<std::string> rows;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      rows.push_back(line);
    }
    while (!rows.empty() && rows.back().empty()) rows.pop_back();
  }
  if (rows.empty()) throw ParseError("map is empty", 1, 1);
  EnvSpec spec;
  spec.height = static_cast<int>(rows.size());
  spec.width = static_cast<int>(rows[0].size());
  if (spec.width == 0) throw ParseError("map row is empty", 1, 1);
  spec.wall.assign(static_cast<std::size_t>(spec.width * spec.height), 0);
  spec.spawn.assign(spec.wall.size(), 0);
  int spawn_cells = 0;
  for (int y = 0; y < spec.height; ++y) {
    const auto& row = rows[y];
    if (static_cast<int>(row.size()) != spec.width) {
      throw ParseError("map is not rectangular: row has " + std::to_string(row.size()) + " cells, expected " +
                           std::to_string(spec.width),
                       y + 1, static_cast<int>(std::min<std::size_t>(row.size(), spec.width)) + 1);
    }
    for (int x = 0; x < spec.width; ++x) {
      const int c = spec.cell(x, y);
      switch (row[x]) {
        case '#': spec.wall[c] = 1; break;
        case '.': break;
        case 'B': spec.start_cells.push_back(c); break;
        case 'g': spec.spawn[c] = 1; ++spawn_cells; break;
        case 'r': spec.spawn[c] = 2; ++spawn_cells; break;
        case 'b': spec.spawn[c] = 3; ++spawn_cells; break;
        default: throw ParseError(std::string("unknown map character '") + row[x] + "'", y + 1, x + 1);
      }
    }
    spec.map_text += row + "\n";
  }
  if (spawn_cells == 0) throw ParseError("map has no spawn cells", 1, 1);
  return spec;
}

struct ObjectState {
  ObjectType type = ObjectType::Star;
  Position pos;
  bool operator==(const ObjectState&) const = default;
};

struct EnvState {
  std::vector<Position> agents;
  std::vector<ObjectState> objects;
  int t = 0;
  std::mt19937_64 rng;
  bool operator==(const EnvState&) const = default;
};

// What one agent sees at one step, in compact form. `local` is the binary
// channels x 7 x 7 window; `objects` lists global cell indices per type.
struct Observation {
  Position self;
  std::vector<std::uint8_t> local;
  std::array<std::vector<std::uint16_t>, kObjectTypes> objects;
};

struct StepInfo {
  std::vector<int> collected;
  std::vector<int> agent_collisions;
  std::vector<int> wall_collisions;
};

struct StepResult {
  std::vector<Observation> observations;
  std::vector<double> rewards;
  bool done = false;
  StepInfo info;
};

namespace detail {

inline bool occupied_by_agent(const EnvState& s, Position p) {
  return std::find(s.agents.begin(), s.agents.end(), p) != s.agents.end();
}

inline bool occupied_by_object(const EnvState& s, Position p) {
  return std::any_of(s.objects.begin(), s.objects.end(), [&](const ObjectState& o) { return o.pos == p; });
}

// Uniform free spawn cell for `type`: no agent, no object.
inline Position free_spawn_cell(const EnvSpec& spec, const EnvState& s, ObjectType type, std::mt19937_64& rng) {
  std::vector<int> free;
  const int bit = 1 << static_cast<int>(type);
  for (int c = 0; c < spec.width * spec.height; ++c) {
    if ((spec.spawn[c] & bit) == 0) continue;
    const Position p = spec.position(c);
    if (occupied_by_agent(s, p) || occupied_by_object(s, p)) continue;
    free.push_back(c);
  }
  if (free.empty()) throw SetupError(std::string("no free spawn cell for ") + kObjectNames[static_cast<int>(type)]);
  std::uniform_int_distribution<std::size_t> pick(0, free.size() - 1);
  return spec.position(free[pick(rng)]);
}

inline Position moved(Position p, Action a) {
  switch (a) {
    case Action::Up: return {p.x, p.y - 1};
    case Action::Down: return {p.x, p.y + 1};
    case Action::Right: return {p.x + 1, p.y};
    case Action::Left: return {p.x - 1, p.y};
  }
  return p;
}

}  // namespace detail

inline Position apply_action(Position p, Action a) { return detail::moved(p, a); }

inline Observation observe(const EnvSpec& spec, const EnvState& state, std::size_t agent) {
  if (agent >= state.agents.size()) throw ContractError("observe: agent index out of range");
  Observation obs;
  obs.self = state.agents[agent];
  obs.local.assign(kLocalChannels * kViewSize * kViewSize, 0);
  auto at = [&](std::size_t ch, int r, int c) -> std::uint8_t& {
    return obs.local[(ch * kViewSize + r) * kViewSize + c];
  };
  at(SelfChannel, kViewRadius, kViewRadius) = 1;
  for (int r = 0; r < kViewSize; ++r)
    for (int c = 0; c < kViewSize; ++c) {
      const int x = obs.self.x + c - kViewRadius, y = obs.self.y + r - kViewRadius;
      if (spec.blocked(x, y)) at(WallChannel, r, c) = 1;
    }
  for (std::size_t j = 0; j < state.agents.size(); ++j) {
    if (j == agent) continue;
    const int c = state.agents[j].x - obs.self.x + kViewRadius, r = state.agents[j].y - obs.self.y + kViewRadius;
    if (r >= 0 && c >= 0 && r < kViewSize && c < kViewSize) at(AgentChannel, r, c) = 1;
  }
  for (const auto& o : state.objects) {
    obs.objects[static_cast<int>(o.type)].push_back(static_cast<std::uint16_t>(spec.cell(o.pos.x, o.pos.y)));
    const int c = o.pos.x - obs.self.x + kViewRadius, r = o.pos.y - obs.self.y + kViewRadius;
    if (r >= 0 && c >= 0 && r < kViewSize && c < kViewSize) {
      at(o.type == ObjectType::Star ? StarChannel : TriangleChannel, r, c) = 1;
    }
  }
  for (auto& list : obs.objects) std::sort(list.begin(), list.end());
  return obs;
}

template <typename T = float>
Tensor<T> local_tensor(const Observation& obs) {
  Tensor<T> t(Shape{kLocalChannels, kViewSize, kViewSize});
  for (std::size_t i = 0; i < obs.local.size(); ++i) t[i] = static_cast<T>(obs.local[i]);
  return t;
}

// Global map in absolute coordinates: g_pos is a one-hot of the agent's cell;
// o_pos holds per-type object occupancy.
template <typename T = float>
Tensor<T> merged_view(const EnvSpec& spec, const Observation& obs, ConditionalKind kind) {
  const auto h = static_cast<std::size_t>(spec.height), w = static_cast<std::size_t>(spec.width);
  if (kind == ConditionalKind::GPos) {
    Tensor<T> t(Shape{1, h, w});
    t[static_cast<std::size_t>(spec.cell(obs.self.x, obs.self.y))] = T(1);
    return t;
  }
  Tensor<T> t(Shape{kObjectTypes, h, w});
  for (std::size_t type = 0; type < kObjectTypes; ++type)
    for (auto c : obs.objects[type]) t[type * h * w + c] = T(1);
  return t;
}

// The global map re-centered on the agent inside a (2H-1) x (2W-1) zero canvas,
// flattened channel-major then row-major.
template <typename T = float>
Tensor<T> relative_view(const EnvSpec& spec, const Observation& obs, ConditionalKind kind) {
  const auto global = merged_view<T>(spec, obs, kind);
  const int ch = static_cast<int>(global.dim(0));
  const int ch_h = 2 * spec.height - 1, ch_w = 2 * spec.width - 1;
  Tensor<T> out(Shape{static_cast<std::size_t>(ch * ch_h * ch_w)});
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const int cy = y - obs.self.y + spec.height - 1, cx = x - obs.self.x + spec.width - 1;
        out[static_cast<std::size_t>((c * ch_h + cy) * ch_w + cx)] =
            global[static_cast<std::size_t>((c * spec.height + y) * spec.width + x)];
      }
  return out;
}

inline std::size_t relative_view_length(const EnvSpec& spec, ConditionalKind kind) {
  return conditional_channels(kind) * static_cast<std::size_t>((2 * spec.height - 1) * (2 * spec.width - 1));
}

template <typename T = float>
Tensor<T> local_observation(const EnvSpec& spec, const EnvState& state, std::size_t agent) {
  return local_tensor<T>(observe(spec, state, agent));
}

template <typename T = float>
Tensor<T> merged_view(const EnvSpec& spec, const EnvState& state, std::size_t agent, ConditionalKind kind) {
  return merged_view<T>(spec, observe(spec, state, agent), kind);
}

template <typename T = float>
Tensor<T> relative_view(const EnvSpec& spec, const EnvState& state, std::size_t agent, ConditionalKind kind) {
  return relative_view<T>(spec, observe(spec, state, agent), kind);
}

inline std::vector<Observation> observe_all(const EnvSpec& spec, const EnvState& state) {
  std::vector<Observation> out;
  out.reserve(state.agents.size());
  for (std::size_t i = 0; i < state.agents.size(); ++i) out.push_back(observe(spec, state, i));
  return out;
}

inline EnvState reset(const EnvSpec& spec, std::uint64_t seed) {
  if (spec.start_cells.size() < spec.roster.size()) {
    throw SetupError("map has " + std::to_string(spec.start_cells.size()) + " start cells for " +
                     std::to_string(spec.roster.size()) + " agents");
  }
  EnvState state;
  state.rng.seed(seed);
  for (std::size_t i = 0; i < spec.roster.size(); ++i) state.agents.push_back(spec.position(spec.start_cells[i]));
  for (std::size_t type = 0; type < kObjectTypes; ++type) {
    for (int k = 0; k < spec.objects_per_type[type]; ++k) {
      const auto t = static_cast<ObjectType>(type);
      state.objects.push_back({t, detail::free_spawn_cell(spec, state, t, state.rng)});
    }
  }
  state.t = 0;
  return state;
}

// Simultaneous moves. A move fails (agent stays, collision reward) when its
// target is a wall or off-grid, was occupied by another agent at the start of
// the step, or is targeted by more than one agent. Successful movers landing
// on an object they are assigned to (symbol and region) collect it; it then
// respawns on a free cell of its spawn region.
inline StepResult step(const EnvSpec& spec, EnvState& state, std::span<const Action> actions) {
  const std::size_t n = state.agents.size();
  if (actions.size() != n) {
    throw ContractError("step: expected " + std::to_string(n) + " actions, got " + std::to_string(actions.size()));
  }
  if (state.t >= spec.horizon) throw ContractError("step: episode already finished");
  for (auto a : actions) {
    if (static_cast<std::size_t>(a) >= kActionCount) throw ContractError("step: invalid action");
  }
  StepResult result;
  result.rewards.assign(n, 0.0);
  result.info.collected.assign(n, 0);
  result.info.agent_collisions.assign(n, 0);
  result.info.wall_collisions.assign(n, 0);

  std::vector<Position> target(n);
  for (std::size_t i = 0; i < n; ++i) target[i] = detail::moved(state.agents[i], actions[i]);

  const std::vector<Position> start = state.agents;
  std::vector<bool> moves(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (spec.blocked(target[i].x, target[i].y)) {
      result.info.wall_collisions[i] = 1;
      continue;
    }
    bool conflict = false;
    for (std::size_t j = 0; j < n && !conflict; ++j) {
      if (j == i) continue;
      conflict = start[j] == target[i] || target[j] == target[i];
    }
    if (conflict) {
      result.info.agent_collisions[i] = 1;
      continue;
    }
    moves[i] = true;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (moves[i]) state.agents[i] = target[i];
    else result.rewards[i] = spec.reward_collision;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!moves[i]) continue;
    const Position p = state.agents[i];
    for (std::size_t k = 0; k < state.objects.size(); ++k) {
      auto& obj = state.objects[k];
      if (!(obj.pos == p) || !spec.roster[i].assigned(obj.type, spec.region(p.x, p.y))) continue;
      result.rewards[i] = spec.reward_object;
      result.info.collected[i] = 1;
      const ObjectType type = obj.type;
      state.objects.erase(state.objects.begin() + static_cast<std::ptrdiff_t>(k));
      const Position fresh = detail::free_spawn_cell(spec, state, type, state.rng);
      state.objects.insert(state.objects.begin() + static_cast<std::ptrdiff_t>(k), {type, fresh});
      break;
    }
  }
  state.t += 1;
  result.done = state.t == spec.horizon;
  result.observations = observe_all(spec, state);
  return result;
}

// One line of the episode trace log.
inline nlohmann::json trace_record(int t, std::span<const Action> actions, const StepResult& r) {
  std::vector<std::string> names;
  for (auto a : actions) names.emplace_back(kActionNames[static_cast<int>(a)]);
  std::vector<int> collisions(r.rewards.size());
  for (std::size_t i = 0; i < collisions.size(); ++i)
    collisions[i] = r.info.agent_collisions[i] + r.info.wall_collisions[i];
  return {{"t", t},
          {"actions", names},
          {"rewards", r.rewards},
          {"collisions", collisions},
          {"collections", r.info.collected}};
}

}  // namespace da6::env
