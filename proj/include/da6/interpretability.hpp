#pragma once

// Attention heatmaps over the local view, staged scenarios, and side-by-side
// comparison reports.
//
// A heatmap is row 0 (the saliency token's query) of a local-encoder attention
// matrix: entry 0 is the saliency-self weight, entries 1..I map back onto the
// patch grid of the local view.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "da6/checkpoint.hpp"
#include "da6/environment.hpp"
#include "da6/model.hpp"
#include "da6/training.hpp"
#include "da6/transformer.hpp"

namespace da6::interp {

enum class Aggregation { MeanHeads, PerHead };

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "mean-heads") return Aggregation::MeanHeads;
  if (s == "per-head") return Aggregation::PerHead;
  throw ConfigError("unknown aggregation '" + s + "' (expected mean-heads or per-head)");
}

inline std::string to_string(Aggregation a) { return a == Aggregation::MeanHeads ? "mean-heads" : "per-head"; }

// "last" or a zero-based layer index.
struct LayerSelector {
  std::optional<std::size_t> index;

  static LayerSelector parse(const std::string& s) {
    if (s == "last") return {};
    const bool digits = !s.empty() && s.size() < 6 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!digits) throw ConfigError("layer must be 'last' or a non-negative integer, got '" + s + "'");
    const auto v = std::stoul(s);
    return {static_cast<std::size_t>(v)};
  }

  std::string label() const { return index ? std::to_string(*index) : "last"; }
};

struct Heatmap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> grid;  // row-major, rows x cols
  double saliency = 0.0;     // token 0 attending to itself
  std::string encoder;
  std::size_t layer = 0;
  std::string aggregation;   // "mean-heads" or "head<k>"

  double at(std::size_t r, std::size_t c) const { return grid[r * cols + c]; }
  double total() const {
    double s = saliency;
    for (double w : grid) s += w;
    return s;
  }
};

// Saliency-row heatmaps of one encoder layer. The record's token grid is
// rows x cols (for the local encoder with patch 1: the 7 x 7 view).
template <typename T>
std::vector<Heatmap> extract_attention(const nn::AttentionRecord<T>& record, LayerSelector layer, Aggregation agg,
                                       std::size_t rows = env::kViewSize, std::size_t cols = env::kViewSize) {
  if (record.layers.empty()) throw ContractError("extract_attention: record '" + record.encoder + "' has no layers");
  const std::size_t l = layer.index.value_or(record.layers.size() - 1);
  if (l >= record.layers.size()) {
    throw ContractError("extract_attention: layer " + std::to_string(l) + " out of range (encoder has " +
                        std::to_string(record.layers.size()) + ")");
  }
  const auto& heads = record.layers[l];
  if (heads.empty()) throw ContractError("extract_attention: layer has no heads");
  const std::size_t n = 1 + rows * cols;
  for (const auto& h : heads) {
    if (h.rank() != 2 || h.dim(0) != n || h.dim(1) != n) {
      throw ShapeError("extract_attention: attention matrix " + shape_string(h.shape()) + " does not match a " +
                       std::to_string(rows) + "x" + std::to_string(cols) + " grid");
    }
  }
  auto make = [&](const std::vector<double>& row, std::string tag) {
    Heatmap m;
    m.rows = rows;
    m.cols = cols;
    m.saliency = row[0];
    m.grid.assign(row.begin() + 1, row.end());
    m.encoder = record.encoder;
    m.layer = l;
    m.aggregation = std::move(tag);
    return m;
  };
  std::vector<Heatmap> out;
  if (agg == Aggregation::PerHead) {
    for (std::size_t k = 0; k < heads.size(); ++k) {
      std::vector<double> row(n);
      for (std::size_t j = 0; j < n; ++j) row[j] = static_cast<double>(heads[k].at(0, j));
      out.push_back(make(row, "head" + std::to_string(k)));
    }
    return out;
  }
  std::vector<double> row(n, 0.0);
  for (const auto& h : heads)
    for (std::size_t j = 0; j < n; ++j) row[j] += static_cast<double>(h.at(0, j));
  double total = 0.0;
  for (auto& w : row) total += (w /= static_cast<double>(heads.size()));
  if (total > 0.0)
    for (auto& w : row) w /= total;
  out.push_back(make(row, "mean-heads"));
  return out;
}

inline std::string render_heatmap(const Heatmap& h, const std::string& format) {
  char buf[64];
  std::string out;
  if (format == "csv") {
    for (std::size_t r = 0; r < h.rows; ++r) {
      for (std::size_t c = 0; c < h.cols; ++c) {
        std::snprintf(buf, sizeof buf, "%s%.6f", c == 0 ? "" : ",", h.at(r, c));
        out += buf;
      }
      out += "\n";
    }
    std::snprintf(buf, sizeof buf, "saliency,%.6f\n", h.saliency);
    return out + buf;
  }
  if (format == "pgm") {
    double mx = 0.0;
    for (double w : h.grid) mx = std::max(mx, w);
    out = "P2\n" + std::to_string(h.cols) + " " + std::to_string(h.rows) + "\n255\n";
    for (std::size_t r = 0; r < h.rows; ++r) {
      for (std::size_t c = 0; c < h.cols; ++c) {
        const long v = mx > 0.0 ? std::lround(255.0 * h.at(r, c) / mx) : 0;
        out += (c == 0 ? "" : " ") + std::to_string(v);
      }
      out += "\n";
    }
    return out;
  }
  throw ContractError("render_heatmap: unknown format '" + format + "' (expected csv or pgm)");
}

// ---------------------------------------------------------------- scenarios

struct AgentPlacement {
  std::optional<std::size_t> id;  // roster index in the checkpoint; by type when absent
  char type = 'A';
  int x = 0;
  int y = 0;
};

struct ObjectPlacement {
  env::ObjectType type = env::ObjectType::Star;
  int x = 0;
  int y = 0;
};

struct Scenario {
  std::string name;
  std::string description;
  bool approximate = false;
  std::string map;                  // map reference (informational)
  std::optional<std::string> map_hash;
  std::vector<AgentPlacement> agents;
  std::vector<ObjectPlacement> objects;
  std::size_t observer = 0;         // index into agents
  std::optional<std::string> conditional_states;
  std::optional<std::string> expected_action;
};

inline std::size_t parse_action(const std::string& s) {
  for (std::size_t a = 0; a < kActionCount; ++a)
    if (kActionNames[a] == s) return a;
  throw ConfigError("unknown action '" + s + "'");
}

inline void to_json(nlohmann::json& j, const Scenario& s) {
  j = nlohmann::json::object();
  j["name"] = s.name;
  if (!s.description.empty()) j["description"] = s.description;
  if (s.approximate) j["approximate"] = true;
  j["map"] = s.map;
  if (s.map_hash) j["map_hash"] = *s.map_hash;
  j["agents"] = nlohmann::json::array();
  for (const auto& a : s.agents) {
    nlohmann::json e = {{"type", std::string(1, a.type)}, {"x", a.x}, {"y", a.y}};
    if (a.id) e["id"] = *a.id;
    j["agents"].push_back(e);
  }
  j["objects"] = nlohmann::json::array();
  for (const auto& o : s.objects)
    j["objects"].push_back({{"type", env::kObjectNames[static_cast<int>(o.type)]}, {"x", o.x}, {"y", o.y}});
  j["observer"] = s.observer;
  if (s.conditional_states) j["conditional_states"] = *s.conditional_states;
  if (s.expected_action) j["expected_action"] = *s.expected_action;
}

inline void from_json(const nlohmann::json& j, Scenario& s) {
  if (!j.is_object()) throw ConfigError("scenario must be a JSON object");
  s.name = j.value("name", std::string{});
  s.description = j.value("description", std::string{});
  s.approximate = j.value("approximate", false);
  s.map = j.value("map", std::string{});
  if (j.contains("map_hash")) s.map_hash = j["map_hash"].get<std::string>();
  s.agents.clear();
  for (const auto& a : j.at("agents")) {
    AgentPlacement p;
    const auto type = a.at("type").get<std::string>();
    if (type.size() != 1) throw ConfigError("agent type must be one character");
    p.type = type[0];
    env::standard_agent(p.type);  // validates the letter
    p.x = a.at("x").get<int>();
    p.y = a.at("y").get<int>();
    if (a.contains("id")) p.id = a["id"].get<std::size_t>();
    s.agents.push_back(p);
  }
  s.objects.clear();
  for (const auto& o : j.value("objects", nlohmann::json::array())) {
    s.objects.push_back({env::parse_object_type(o.at("type").get<std::string>()), o.at("x").get<int>(),
                         o.at("y").get<int>()});
  }
  s.observer = j.value("observer", std::size_t{0});
  if (j.contains("conditional_states")) s.conditional_states = j["conditional_states"].get<std::string>();
  if (j.contains("expected_action")) {
    s.expected_action = j["expected_action"].get<std::string>();
    parse_action(*s.expected_action);
  }
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path)).get<Scenario>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Canonical fingerprint of a scenario's content.
inline std::string scenario_hash(const Scenario& s) { return hex64(fnv1a(nlohmann::json(s).dump())); }

inline std::string map_hash(const env::EnvSpec& spec) { return hex64(fnv1a(spec.map_text)); }

struct Violation {
  int x = 0;
  int y = 0;
  std::string reason;
};

inline void to_json(nlohmann::json& j, const Violation& v) { j = {{"x", v.x}, {"y", v.y}, {"reason", v.reason}}; }

class ScenarioError : public ConfigError {
 public:
  explicit ScenarioError(std::vector<Violation> v) : ConfigError(summary(v)), violations_(std::move(v)) {}
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  static std::string summary(const std::vector<Violation>& v) {
    std::string out = "illegal scenario:";
    for (const auto& e : v) out += " (" + std::to_string(e.x) + "," + std::to_string(e.y) + ") " + e.reason + ";";
    return out;
  }
  std::vector<Violation> violations_;
};

// Every problem with the placements; an empty list means the scenario is legal.
// Agent ids refer to `roster` when given.
inline std::vector<Violation> validate_scenario(const Scenario& s, const env::EnvSpec& spec,
                                                const std::vector<env::AgentSpec>* roster = nullptr) {
  std::vector<Violation> out;
  std::set<int> used;
  auto place = [&](int x, int y, const std::string& what) {
    if (!spec.in_bounds(x, y)) {
      out.push_back({x, y, what + " outside the map"});
      return;
    }
    if (spec.wall[spec.cell(x, y)] != 0) out.push_back({x, y, what + " on a wall"});
    if (!used.insert(spec.cell(x, y)).second) out.push_back({x, y, what + " overlaps another placement"});
  };
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    const auto& a = s.agents[i];
    place(a.x, a.y, "agent " + std::to_string(i));
    if (roster != nullptr && a.id) {
      if (*a.id >= roster->size()) {
        out.push_back({a.x, a.y, "agent " + std::to_string(i) + " id " + std::to_string(*a.id) + " not in roster"});
      } else if ((*roster)[*a.id].type != a.type) {
        out.push_back({a.x, a.y, "agent " + std::to_string(i) + " type does not match roster id"});
      }
    }
  }
  for (std::size_t k = 0; k < s.objects.size(); ++k) place(s.objects[k].x, s.objects[k].y, "object " + std::to_string(k));
  if (s.agents.empty()) {
    out.push_back({-1, -1, "scenario has no agents"});
  } else if (s.observer >= s.agents.size()) {
    out.push_back({-1, -1, "observer " + std::to_string(s.observer) + " is not a placed agent"});
  }
  return out;
}

// Roster index of the network that drives the observer.
inline std::size_t observer_network(const Scenario& s, const std::vector<env::AgentSpec>& roster) {
  const auto& a = s.agents.at(s.observer);
  if (a.id) return *a.id;
  for (std::size_t i = 0; i < roster.size(); ++i)
    if (roster[i].type == a.type) return i;
  throw ConfigError(std::string("checkpoint roster has no agent of type ") + a.type);
}

// The exact environment state a scenario describes.
inline env::EnvState build_state(const Scenario& s) {
  env::EnvState state;
  for (const auto& a : s.agents) state.agents.push_back({a.x, a.y});
  for (const auto& o : s.objects) state.objects.push_back({o.type, {o.x, o.y}});
  return state;
}

struct CmSummary {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double saliency = 0.0;
  std::vector<double> tokens;  // mean-heads saliency row over the patch grid, last layer
};

struct ScenarioReport {
  std::string checkpoint;
  Variant variant = Variant::Da6Dqn;
  std::size_t network = 0;
  std::size_t action = 0;
  std::array<double, kActionCount> scores{};
  std::vector<Heatmap> heatmaps;
  std::vector<CmSummary> cm;
  std::string conditional_states;           // what the checkpoint consumes
  std::optional<std::string> requested;     // what the scenario asked for
  std::optional<std::string> expected_action;
};

inline double round9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

inline nlohmann::json heatmap_json(const Heatmap& h) {
  nlohmann::json grid = nlohmann::json::array();
  for (std::size_t r = 0; r < h.rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < h.cols; ++c) row.push_back(round9(h.at(r, c)));
    grid.push_back(row);
  }
  return {{"encoder", h.encoder},
          {"layer", h.layer},
          {"aggregation", h.aggregation},
          {"grid", grid},
          {"saliency", round9(h.saliency)}};
}

inline nlohmann::json report_json(const ScenarioReport& r) {
  nlohmann::json scores = nlohmann::json::array();
  for (double s : r.scores) scores.push_back(round9(s));
  nlohmann::json heatmaps = nlohmann::json::array();
  for (const auto& h : r.heatmaps) heatmaps.push_back(heatmap_json(h));
  nlohmann::json cm = nlohmann::json::array();
  for (const auto& c : r.cm) {
    nlohmann::json tokens = nlohmann::json::array();
    for (double w : c.tokens) tokens.push_back(round9(w));
    cm.push_back({{"name", c.name}, {"rows", c.rows}, {"cols", c.cols}, {"saliency", round9(c.saliency)},
                  {"tokens", tokens}});
  }
  nlohmann::json j = {{"checkpoint", r.checkpoint},
                      {"variant", to_string(r.variant)},
                      {"network", r.network},
                      {"action", kActionNames[r.action]},
                      {"action_index", r.action},
                      {"scores", scores},
                      {"heatmap", heatmaps.empty() ? nlohmann::json(nullptr) : heatmaps[0]},
                      {"heatmaps", heatmaps},
                      {"cm_attention", cm},
                      {"conditional_states", r.conditional_states}};
  if (r.requested) j["requested_conditional_states"] = *r.requested;
  if (r.expected_action) {
    j["expected_action"] = *r.expected_action;
    j["matches_expected"] = kActionNames[r.action] == *r.expected_action;
  }
  return j;
}

struct ProbeOptions {
  LayerSelector layer;
  Aggregation aggregation = Aggregation::MeanHeads;
};

// Forward pass of the observer's network on the staged state, with attention
// capture. No environment step is taken.
inline ScenarioReport run_scenario(const Scenario& s, const train::PolicySet& set, const ProbeOptions& opt = {}) {
  if (!is_attentional(set.model.variant)) {
    throw ConfigError("checkpoint '" + set.id + "' is " + to_string(set.model.variant) + ", which has no attention");
  }
  if (s.map_hash && *s.map_hash != map_hash(set.spec)) {
    throw ConfigError("scenario map hash " + *s.map_hash + " does not match checkpoint map " + map_hash(set.spec));
  }
  auto violations = validate_scenario(s, set.spec, &set.spec.roster);
  if (!violations.empty()) throw ScenarioError(std::move(violations));
  const std::size_t net = observer_network(s, set.spec.roster);
  if (net >= set.agents.size()) throw ConfigError("observer network index out of range");

  env::EnvSpec spec = set.spec;
  spec.roster.clear();
  for (const auto& a : s.agents) spec.roster.push_back(env::standard_agent(a.type));
  const auto state = build_state(s);
  const auto obs = env::observe(spec, state, s.observer);
  const train::InputEncoder enc{&set.spec, set.model.variant, set.kinds};
  const auto out = forward_policy(set.agents[net], enc.encode<float>(obs), set.tau_seed, true);

  ScenarioReport r;
  r.checkpoint = set.id;
  r.variant = set.model.variant;
  r.network = net;
  for (std::size_t a = 0; a < kActionCount; ++a) r.scores[a] = static_cast<double>(out.scores[a]);
  r.action = argmax_action(out.scores);
  r.conditional_states = train::conditional_label(set.kinds);
  r.requested = s.conditional_states;
  r.expected_action = s.expected_action;
  const auto* local = nn::find_record(out.records, std::string("local"));
  if (local == nullptr) throw ContractError("forward pass recorded no local attention");
  const std::size_t grid = set.model.local.view / set.model.local.patch;
  r.heatmaps = extract_attention(*local, opt.layer, opt.aggregation, grid, grid);
  for (const auto& sub : set.model.submodules) {
    const auto* rec = nn::find_record(out.records, sub.name);
    if (rec == nullptr) continue;
    const auto h = extract_attention(*rec, {}, Aggregation::MeanHeads, sub.height / sub.patch, sub.width / sub.patch);
    r.cm.push_back({sub.name, h[0].rows, h[0].cols, h[0].saliency, h[0].grid});
  }
  return r;
}

// Runs one scenario against several checkpoints and writes
//   <out>/index.json
//   <out>/<k>-<checkpoint id>/{report.json, heatmap.csv, heatmap.pgm}
inline nlohmann::json compare_variants(const Scenario& s, const std::vector<train::PolicySet>& sets,
                                       const std::filesystem::path& out, const ProbeOptions& opt = {}) {
  if (sets.size() < 2) throw ConfigError("compare needs at least two checkpoints");
  const auto hash = map_hash(sets[0].spec);
  for (const auto& set : sets) {
    if (map_hash(set.spec) != hash) {
      throw ConfigError("checkpoint '" + set.id + "' was trained on a different map than '" + sets[0].id + "'");
    }
  }
  std::filesystem::create_directories(out);
  nlohmann::json index = {{"scenario", s.name},
                          {"scenario_hash", scenario_hash(s)},
                          {"map_hash", hash},
                          {"entries", nlohmann::json::array()}};
  for (std::size_t k = 0; k < sets.size(); ++k) {
    const auto report = run_scenario(s, sets[k], opt);
    const std::string dir = std::to_string(k) + "-" + (sets[k].id.empty() ? "checkpoint" : sets[k].id);
    const auto path = out / dir;
    std::filesystem::create_directories(path);
    std::ofstream(path / "report.json") << report_json(report).dump(2) << "\n";
    std::ofstream(path / "heatmap.csv") << render_heatmap(report.heatmaps[0], "csv");
    std::ofstream(path / "heatmap.pgm") << render_heatmap(report.heatmaps[0], "pgm");
    nlohmann::json scores = nlohmann::json::array();
    for (double v : report.scores) scores.push_back(round9(v));
    index["entries"].push_back({{"checkpoint", sets[k].id},
                                {"variant", to_string(report.variant)},
                                {"scenario_hash", scenario_hash(s)},
                                {"action", kActionNames[report.action]},
                                {"scores", scores},
                                {"dir", dir}});
  }
  std::ofstream(out / "index.json") << index.dump(2) << "\n";
  return index;
}

}  // namespace da6::interp
