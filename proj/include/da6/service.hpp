#pragma once

// HTTP/JSON front end for scenario inference.
//
//   GET  /api/checkpoints   [{id, variant, conditional_states}]
//   GET  /api/map           grid rows, legend, quadrant bounds, start cells
//   POST /api/validate      {scenario, checkpoint_id?} -> {valid, violations}
//   POST /api/infer         {scenario, checkpoint_id, layer?, agg?} -> probe report
//   POST /api/reload        rescan the checkpoint directory
//
// Errors are {code, message} with a 4xx status. Handlers only read shared
// state; reload swaps it under an exclusive lock.

#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "da6/interpretability.hpp"
#include "da6/training.hpp"

namespace da6::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint_dir = "checkpoints";
  std::string map;  // optional; defaults to the first checkpoint's map
  std::size_t max_body = 1 << 20;
  std::uint64_t tau_seed = 0;

  void validate() const {
    if (port < 0 || port > 65535) throw ConfigError("port " + std::to_string(port) + " out of range");
    std::error_code ec;
    if (!std::filesystem::is_directory(checkpoint_dir, ec)) {
      throw ConfigError("checkpoint directory '" + checkpoint_dir + "' is not readable");
    }
    if (max_body == 0) throw ConfigError("max_body must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = {{"host", c.host},         {"port", c.port},         {"checkpoint_dir", c.checkpoint_dir},
       {"map", c.map},           {"max_body", c.max_body}, {"tau_seed", c.tau_seed}};
}

inline void from_json(const nlohmann::json& j, ServiceConfig& c) {
  static const std::set<std::string> known = {"host", "port", "checkpoint_dir", "map", "max_body", "tau_seed"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown service config key '" + k + "'");
  const ServiceConfig d;
  c.host = j.value("host", d.host);
  c.port = j.value("port", d.port);
  c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
  c.map = j.value("map", d.map);
  c.max_body = j.value("max_body", d.max_body);
  c.tau_seed = j.value("tau_seed", d.tau_seed);
}

// Relative paths resolve against the config file; DA6_PORT overrides the port.
inline ServiceConfig load_service_config(const std::filesystem::path& path) {
  ServiceConfig c;
  try {
    c = nlohmann::json::parse(read_file(path)).get<ServiceConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.checkpoint_dir);
  resolve(c.map);
  if (const char* env = std::getenv("DA6_PORT"); env != nullptr && *env != '\0') {
    try {
      std::size_t pos = 0;
      c.port = std::stoi(env, &pos);
      if (pos != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("DA6_PORT is not a port number: ") + env);
    }
  }
  c.validate();
  return c;
}

struct Response {
  int status = 200;
  std::string body;
};

inline Response error(int status, const std::string& code, const std::string& message,
                      nlohmann::json extra = nlohmann::json::object()) {
  extra["code"] = code;
  extra["message"] = message;
  return {status, extra.dump()};
}

class ProbeService {
 public:
  explicit ProbeService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    reload();
  }

  const ServiceConfig& config() const { return cfg_; }

  // Loads every *.ckpt in the checkpoint directory; the id is the file stem.
  void reload() {
    std::map<std::string, train::PolicySet> sets;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(cfg_.checkpoint_dir))
      if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto set = train::load_policies(f);
      set.tau_seed = cfg_.tau_seed;
      sets.emplace(set.id, std::move(set));
    }
    std::optional<env::EnvSpec> map;
    if (!cfg_.map.empty()) {
      map = env::load_map(read_file(cfg_.map));
    } else if (!sets.empty()) {
      map = sets.begin()->second.spec;
    }
    std::unique_lock lock(mu_);
    sets_ = std::move(sets);
    map_ = std::move(map);
  }

  Response checkpoints() const {
    std::shared_lock lock(mu_);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [id, set] : sets_) {
      out.push_back({{"id", id},
                     {"variant", to_string(set.model.variant)},
                     {"conditional_states", train::conditional_label(set.kinds)}});
    }
    return {200, out.dump()};
  }

  Response map() const {
    std::shared_lock lock(mu_);
    if (!map_) return error(404, "no_map", "no map configured and no checkpoint loaded");
    const auto& s = *map_;
    nlohmann::json rows = nlohmann::json::array();
    std::istringstream in(s.map_text);
    for (std::string line; std::getline(in, line);) rows.push_back(line);
    const int mx = (s.width + 1) / 2, my = (s.height + 1) / 2;
    auto box = [](int x0, int y0, int x1, int y1) { return nlohmann::json{{"x0", x0}, {"y0", y0}, {"x1", x1}, {"y1", y1}}; };
    nlohmann::json starts = nlohmann::json::array();
    for (int c : s.start_cells) starts.push_back({{"x", c % s.width}, {"y", c / s.width}});
    nlohmann::json out = {
        {"width", s.width},
        {"height", s.height},
        {"rows", rows},
        {"map_hash", interp::map_hash(s)},
        {"legend",
         {{"#", "wall"}, {".", "floor"}, {"B", "start"}, {"g", "star spawn"}, {"r", "triangle spawn"}, {"b", "star and triangle spawn"}}},
        {"regions",
         {{"gamma", box(0, 0, mx - 1, my - 1)},
          {"delta", box(mx, 0, s.width - 1, my - 1)},
          {"theta", box(0, my, mx - 1, s.height - 1)},
          {"lambda", box(mx, my, s.width - 1, s.height - 1)}}},
        {"start_cells", starts}};
    return {200, out.dump()};
  }

  Response validate(const std::string& body) const {
    return guarded([&] {
      const auto req = parse(body);
      const auto scenario = req.at("scenario").get<interp::Scenario>();
      std::shared_lock lock(mu_);
      const env::EnvSpec* spec = map_ ? &*map_ : nullptr;
      const std::vector<env::AgentSpec>* roster = nullptr;
      if (req.contains("checkpoint_id")) {
        const auto* set = find(req["checkpoint_id"].get<std::string>());
        if (set == nullptr) return unknown(req["checkpoint_id"].get<std::string>());
        spec = &set->spec;
        roster = &set->spec.roster;
      }
      if (spec == nullptr) return error(404, "no_map", "no map to validate against");
      const auto v = interp::validate_scenario(scenario, *spec, roster);
      return Response{200, nlohmann::json{{"valid", v.empty()}, {"violations", v}}.dump()};
    });
  }

  Response infer(const std::string& body) const {
    return guarded([&] {
      const auto req = parse(body);
      const auto scenario = req.at("scenario").get<interp::Scenario>();
      const auto id = req.at("checkpoint_id").get<std::string>();
      interp::ProbeOptions opt;
      if (req.contains("layer")) {
        const auto& l = req["layer"];
        opt.layer = interp::LayerSelector::parse(l.is_string() ? l.get<std::string>() : l.dump());
      }
      if (req.contains("agg")) opt.aggregation = interp::parse_aggregation(req["agg"].get<std::string>());
      std::shared_lock lock(mu_);
      const auto* set = find(id);
      if (set == nullptr) return unknown(id);
      auto out = interp::report_json(interp::run_scenario(scenario, *set, opt));
      out["scenario_hash"] = interp::scenario_hash(scenario);
      return Response{200, out.dump()};
    });
  }

  Response handle(const std::string& method, const std::string& path, const std::string& body) {
    if (body.size() > cfg_.max_body) {
      return error(413, "payload_too_large", "request body exceeds " + std::to_string(cfg_.max_body) + " bytes");
    }
    if (method == "GET" && path == "/api/checkpoints") return checkpoints();
    if (method == "GET" && path == "/api/map") return map();
    if (method == "POST" && path == "/api/validate") return validate(body);
    if (method == "POST" && path == "/api/infer") return infer(body);
    if (method == "POST" && path == "/api/reload") {
      return guarded([&] {
        reload();
        return checkpoints();
      });
    }
    return error(404, "not_found", method + " " + path + " is not an endpoint");
  }

 private:
  static nlohmann::json parse(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("request body is not a JSON object");
    return j;
  }

  const train::PolicySet* find(const std::string& id) const {
    auto it = sets_.find(id);
    return it == sets_.end() ? nullptr : &it->second;
  }

  static Response unknown(const std::string& id) { return error(404, "unknown_checkpoint", "no checkpoint '" + id + "'"); }

  template <typename F>
  static Response guarded(F&& f) {
    try {
      return f();
    } catch (const interp::ScenarioError& e) {
      return error(422, "illegal_scenario", e.what(), {{"violations", e.violations()}});
    } catch (const nlohmann::json::exception& e) {
      return error(400, "bad_request", e.what());
    } catch (const ConfigError& e) {
      return error(400, "bad_request", e.what());
    } catch (const ParseError& e) {
      return error(400, "bad_request", e.what());
    } catch (const ContractError& e) {
      return error(400, "bad_request", e.what());
    } catch (const std::exception& e) {
      return error(500, "internal", e.what());
    }
  }

  ServiceConfig cfg_;
  mutable std::shared_mutex mu_;
  std::map<std::string, train::PolicySet> sets_;
  std::optional<env::EnvSpec> map_;
};

// Routes every endpoint of `service` onto `server`.
inline void mount(httplib::Server& server, ProbeService& service) {
  server.set_payload_max_length(service.config().max_body);
  auto route = [&service](const httplib::Request& req, httplib::Response& res) {
    const auto r = service.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json; charset=utf-8");
  };
  server.Get("/api/checkpoints", route);
  server.Get("/api/map", route);
  server.Post("/api/validate", route);
  server.Post("/api/infer", route);
  server.Post("/api/reload", route);
  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const auto r = res.status == 413
                       ? error(413, "payload_too_large", "request body too large")
                       : error(res.status, res.status == 404 ? "not_found" : "http_error", req.method + " " + req.path);
    res.set_content(r.body, "application/json; charset=utf-8");
  });
}

// Blocks until the server stops.
inline void serve(const ServiceConfig& cfg, std::ostream* log = nullptr) {
  ProbeService service(cfg);
  httplib::Server server;
  mount(server, service);
  if (log != nullptr) *log << "listening on http://" << cfg.host << ":" << cfg.port << "\n";
  if (!server.listen(cfg.host, cfg.port)) {
    throw ConfigError("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
  }
}

}  // namespace da6::service
