#pragma once

// Independent learners: one network, target network, optimizer and replay
// buffer per agent. Nothing is shared between agents.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "da6/autodiff.hpp"
#include "da6/checkpoint.hpp"
#include "da6/environment.hpp"
#include "da6/model.hpp"

namespace da6::train {

using Rng = std::mt19937_64;
using env::ConditionalKind;
using env::Observation;

// Independent 64-bit seed for a named stream of a run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream in(state);
  in >> rng;
  if (!in) throw ConfigError("malformed RNG state");
  return rng;
}

// ---------------------------------------------------------------- conditional states

inline std::string conditional_label(const std::vector<ConditionalKind>& kinds) {
  if (kinds.empty()) return "none";
  std::string out;
  for (auto k : kinds) out += (out.empty() ? "" : "+") + env::to_string(k);
  return out;
}

// "none", "g_pos", "g_pos+o_pos", or a JSON array of names.
inline std::vector<ConditionalKind> parse_conditional_states(const nlohmann::json& j) {
  std::vector<std::string> names;
  if (j.is_array()) {
    names = j.get<std::vector<std::string>>();
  } else {
    const auto text = j.get<std::string>();
    if (text != "none" && !text.empty()) {
      std::size_t start = 0;
      while (start <= text.size()) {
        const auto end = text.find('+', start);
        names.push_back(text.substr(start, end - start));
        if (end == std::string::npos) break;
        start = end + 1;
      }
    }
  }
  std::vector<ConditionalKind> kinds;
  for (const auto& n : names) {
    const auto k = env::parse_conditional_kind(n);
    if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) throw ConfigError("conditional state '" + n + "' repeated");
    kinds.push_back(k);
  }
  return kinds;
}

// Maps an observation to network inputs for a given variant.
struct InputEncoder {
  const env::EnvSpec* spec = nullptr;
  Variant variant = Variant::Da6Dqn;
  std::vector<ConditionalKind> kinds;

  template <typename T>
  PolicyInput<T> encode(const Observation& obs) const {
    PolicyInput<T> in;
    in.local = env::local_tensor<T>(obs);
    if (is_da6(variant)) {
      for (auto k : kinds) in.conditional.push_back(env::merged_view<T>(*spec, obs, k));
    } else if (!is_attentional(variant)) {
      std::vector<T> flat(in.local.data().begin(), in.local.data().end());
      for (auto k : kinds) {
        const auto rel = env::relative_view<T>(*spec, obs, k);
        flat.insert(flat.end(), rel.data().begin(), rel.data().end());
      }
      const std::size_t n = flat.size();
      in.flat = Tensor<T>(Shape{n}, std::move(flat));
    }
    return in;
  }

  std::size_t flat_length() const {
    std::size_t n = env::kLocalChannels * env::kViewSize * env::kViewSize;
    for (auto k : kinds) n += env::relative_view_length(*spec, k);
    return n;
  }
};

// ---------------------------------------------------------------- replay

struct Transition {
  Observation obs;
  std::uint8_t action = 0;
  float reward = 0.0f;
  Observation next;
  bool done = false;
};

// Fixed-capacity FIFO; sampling is uniform with replacement.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 1) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  void push(Transition t) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[head_] = std::move(t);
    }
    head_ = (head_ + 1) % capacity_;
  }

  // i-th oldest stored transition.
  const Transition& at(std::size_t i) const {
    if (i >= data_.size()) throw ContractError("replay index out of range");
    const std::size_t start = data_.size() < capacity_ ? 0 : head_;
    return data_[(start + i) % data_.size()];
  }

  // Positions in age order (0 = oldest).
  std::vector<std::size_t> sample_indices(std::size_t batch, Rng& rng) const {
    if (data_.empty()) throw ContractError("replay_sample: buffer is empty");
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = pick(rng);
    return idx;
  }

  std::vector<const Transition*> sample(std::size_t batch, Rng& rng) const {
    std::vector<const Transition*> out;
    for (auto i : sample_indices(batch, rng)) out.push_back(&at(i));
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Transition> data_;
};

// ---------------------------------------------------------------- exploration

// With probability eps a uniform action, otherwise the greedy action of
// `scores()`. The scores are only computed when needed.
template <typename ScoreFn>
std::size_t select_action(double eps, Rng& rng, ScoreFn&& scores) {
  if (!(eps >= 0.0 && eps <= 1.0)) throw ContractError("epsilon " + std::to_string(eps) + " outside [0,1]");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < eps) {
    std::uniform_int_distribution<std::size_t> pick(0, kActionCount - 1);
    return pick(rng);
  }
  return argmax_action(scores());
}

template <typename T>
std::size_t epsilon_greedy(const std::array<T, kActionCount>& scores, double eps, Rng& rng) {
  return select_action(eps, rng, [&] { return scores; });
}

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  std::uint64_t decay_steps = 100000;

  double at(std::uint64_t step) const {
    if (decay_steps == 0) return end;
    const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(decay_steps));
    return start + (end - start) * f;
  }
};

// ---------------------------------------------------------------- losses

inline void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma " + std::to_string(gamma) + " outside [0,1)");
}

template <typename T>
Tensor<T> one_hot_column(std::size_t action) {
  Tensor<T> t(Shape{kActionCount, 1});
  t[action] = T(1);
  return t;
}

// Mean squared TD error against r + (1-done) gamma max_a' Q_target(s', a').
// With `accumulate`, d(loss)/d(theta) is added to the online parameters' grads.
template <typename T>
double dqn_loss(std::span<const Transition* const> batch, const Network<T>& online, const Network<T>& target,
                double gamma, const InputEncoder& enc, bool accumulate = true) {
  check_gamma(gamma);
  if (batch.empty()) throw ContractError("dqn_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  ad::Graph<T> g;
  for (const auto* tr : batch) {
    double y = tr->reward;
    if (!tr->done) {
      const auto next = forward_policy(target, enc.encode<T>(tr->next));
      y += gamma * static_cast<double>(*std::max_element(next.scores.begin(), next.scores.end()));
    }
    g.clear();
    auto out = online.forward(g, enc.encode<T>(tr->obs));
    auto q = ad::matmul(out.values, g.constant(one_hot_column<T>(tr->action)));
    auto diff = ad::sub(q, g.constant(Tensor<T>(Shape{1, 1}, static_cast<T>(y))));
    auto loss = ad::scale(ad::mul(diff, diff), inv_b);
    total += static_cast<double>(loss.value().item());
    if (accumulate) g.backward(loss);
  }
  return total;
}

// rho_tau(u) = |tau - 1{u<0}| L_kappa(u) / kappa, averaged over all (tau_i, tau'_j)
// pairs with u_ij = targets_j - z_i. Plain scalar evaluation.
inline double quantile_huber_value(std::span<const double> z, std::span<const double> taus,
                                   std::span<const double> targets, double kappa) {
  if (kappa <= 0.0) throw ConfigError("kappa must be positive");
  if (z.size() != taus.size() || z.empty() || targets.empty()) throw ShapeError("quantile_huber: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    for (double t : targets) {
      const double u = t - z[i];
      const double l = std::abs(u) <= kappa ? 0.5 * u * u : kappa * (std::abs(u) - 0.5 * kappa);
      acc += std::abs(taus[i] - (u < 0.0 ? 1.0 : 0.0)) * l / kappa;
    }
  return acc / static_cast<double>(z.size() * targets.size());
}

// Graph form of quantile_huber_value: `z` is N x 1, one entry per tau.
template <typename T>
ad::Var<T> quantile_huber_loss(ad::Var<T> z, std::span<const T> taus, std::span<const T> targets, double kappa) {
  if (kappa <= 0.0) throw ConfigError("kappa must be positive");
  auto& g = *z.graph;
  const std::size_t n = taus.size(), m = targets.size();
  if (z.shape() != Shape{n, 1} || m == 0) throw ShapeError("quantile_huber_loss: z must be N x 1");
  auto zb = ad::matmul(z, g.constant(Tensor<T>(Shape{1, m}, T(1))));
  Tensor<T> tgt(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) tgt[i * m + j] = targets[j];
  auto u = ad::sub(g.constant(tgt), zb);
  Tensor<T> w(Shape{n, m});
  const auto& uv = u.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      w[i * m + j] = static_cast<T>(std::abs(static_cast<double>(taus[i]) - (uv[i * m + j] < T(0) ? 1.0 : 0.0)) / kappa);
  return ad::mean(ad::mul(ad::huber(u, kappa), g.constant(w)));
}

template <typename T>
std::vector<T> draw_taus(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<T> taus;
  taus.reserve(n);
  while (taus.size() < n) {
    const T t = static_cast<T>(dist(rng));
    if (t > T(0) && t < T(1)) taus.push_back(t);
  }
  return taus;
}

// Quantile-Huber loss, averaged over the batch. The bootstrap action is the
// greedy action of the target network's mean over its own tau' samples.
template <typename T>
double iqn_quantile_huber_loss(std::span<const Transition* const> batch, const Network<T>& online,
                               const Network<T>& target, double gamma, const InputEncoder& enc, Rng& rng,
                               bool accumulate = true) {
  check_gamma(gamma);
  const auto& hc = online.config().head;
  if (hc.kappa <= 0.0) throw ConfigError("kappa must be positive");
  if (hc.train_quantiles == 0 || hc.target_quantiles == 0) throw ConfigError("quantile counts must be positive");
  if (batch.empty()) throw ContractError("iqn loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  ad::Graph<T> g;
  for (const auto* tr : batch) {
    const auto taus = draw_taus<T>(hc.train_quantiles, rng);
    const auto target_taus = draw_taus<T>(hc.target_quantiles, rng);
    std::vector<T> targets(target_taus.size(), static_cast<T>(tr->reward));
    if (!tr->done) {
      ad::Graph<T> tg;
      const auto zn = target.forward(tg, enc.encode<T>(tr->next), target_taus).values.value();
      std::array<T, kActionCount> means{};
      for (std::size_t j = 0; j < zn.rows(); ++j)
        for (std::size_t a = 0; a < kActionCount; ++a) means[a] += zn.at(j, a);
      const auto best = argmax_action(means);
      for (std::size_t j = 0; j < targets.size(); ++j)
        targets[j] = static_cast<T>(tr->reward + gamma * static_cast<double>(zn.at(j, best)));
    }
    g.clear();
    auto out = online.forward(g, enc.encode<T>(tr->obs), taus);
    auto z = ad::matmul(out.values, g.constant(one_hot_column<T>(tr->action)));
    auto loss = ad::scale(quantile_huber_loss<T>(z, taus, targets, hc.kappa), inv_b);
    total += static_cast<double>(loss.value().item());
    if (accumulate) g.backward(loss);
  }
  return total;
}

// ---------------------------------------------------------------- optimizer

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 10.0;  // global gradient norm; 0 disables
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  template <typename ParamPtrs>
  Adam(AdamOptions options, const ParamPtrs& params) : options_(options) {
    for (const auto* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  const AdamOptions& options() const { return options_; }
  std::uint64_t steps() const { return t_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

  void step(const std::vector<ad::Parameter<T>*>& params) {
    if (params.size() != m_.size()) throw ContractError("adam: parameter count changed");
    double scale = 1.0;
    if (options_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto* p : params)
        for (T gv : p->grad.data()) sq += static_cast<double>(gv) * static_cast<double>(gv);
      const double norm = std::sqrt(sq);
      if (norm > options_.clip_norm) scale = options_.clip_norm / norm;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double gk = scale * static_cast<double>(p.grad[k]);
        const double mk = options_.beta1 * static_cast<double>(m[k]) + (1.0 - options_.beta1) * gk;
        const double vk = options_.beta2 * static_cast<double>(v[k]) + (1.0 - options_.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = options_.lr * (mk / c1) / (std::sqrt(vk / c2) + options_.eps);
        p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) - update);
      }
    }
  }

 private:
  AdamOptions options_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------- configuration

// Widths of the encoders. Conditional submodules default to the local width.
struct ArchitectureConfig {
  LocalConfig local{5, 7, 1, 64, 2, 4};
  std::size_t cond_dim = 0;
  std::size_t cond_heads = 0;
  std::size_t cond_layers = 1;
  std::size_t cond_patch = 5;
  std::size_t ff_multiplier = 2;
  HeadConfig head;
  std::vector<std::size_t> baseline_hidden = {256, 128};
  bool final_norm = true;
};

inline void to_json(nlohmann::json& j, const ArchitectureConfig& a) {
  j = {{"local", a.local},
       {"cond_dim", a.cond_dim},
       {"cond_heads", a.cond_heads},
       {"cond_layers", a.cond_layers},
       {"cond_patch", a.cond_patch},
       {"ff_multiplier", a.ff_multiplier},
       {"head", a.head},
       {"baseline_hidden", a.baseline_hidden},
       {"final_norm", a.final_norm}};
}

inline void from_json(const nlohmann::json& j, ArchitectureConfig& a) {
  ArchitectureConfig d;
  a.local = j.value("local", d.local);
  a.cond_dim = j.value("cond_dim", d.cond_dim);
  a.cond_heads = j.value("cond_heads", d.cond_heads);
  a.cond_layers = j.value("cond_layers", d.cond_layers);
  a.cond_patch = j.value("cond_patch", d.cond_patch);
  a.ff_multiplier = j.value("ff_multiplier", d.ff_multiplier);
  a.head = j.value("head", d.head);
  a.baseline_hidden = j.value("baseline_hidden", d.baseline_hidden);
  a.final_norm = j.value("final_norm", d.final_norm);
}

struct TrainConfig {
  std::string map_path;
  std::string map_text;  // inline map; takes precedence over map_path
  std::vector<env::AgentSpec> roster = env::default_roster();
  std::array<int, env::kObjectTypes> objects_per_type = {20, 20};
  int horizon = 200;
  int episodes = 5000;
  double gamma = 0.9;
  double lr = 5e-4;
  double grad_clip = 10.0;
  std::size_t batch_size = 32;
  std::size_t replay_capacity = 100000;
  std::size_t warmup = 1000;
  std::uint64_t target_sync = 2000;
  EpsilonSchedule epsilon;
  int eval_every = 0;
  int eval_episodes = 5;
  int checkpoint_every = 0;
  std::uint64_t seed = 0;
  std::uint64_t tau_seed = 0;
  Variant variant = Variant::Da6Dqn;
  std::vector<ConditionalKind> conditional_states = {ConditionalKind::GPos};
  ArchitectureConfig model;

  void validate() const {
    check_gamma(gamma);
    if (!(epsilon.start >= 0.0 && epsilon.start <= 1.0 && epsilon.end >= 0.0 && epsilon.end <= 1.0)) {
      throw ConfigError("epsilon values must lie in [0,1]");
    }
    if (episodes < 0 || horizon <= 0) throw ConfigError("episodes must be >= 0 and horizon > 0");
    if (batch_size == 0 || replay_capacity == 0 || target_sync == 0) {
      throw ConfigError("batch size, replay capacity and target sync must be positive");
    }
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (roster.empty()) throw ConfigError("roster is empty");
    if (!is_da6(variant) && is_attentional(variant) && !conditional_states.empty()) {
      throw ConfigError(to_string(variant) + " takes no conditional states; set \"conditional_states\": \"none\"");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"map", c.map_path},
       {"map_text", c.map_text},
       {"roster", c.roster},
       {"objects_per_type", c.objects_per_type},
       {"horizon", c.horizon},
       {"episodes", c.episodes},
       {"gamma", c.gamma},
       {"lr", c.lr},
       {"grad_clip", c.grad_clip},
       {"batch_size", c.batch_size},
       {"replay_capacity", c.replay_capacity},
       {"warmup", c.warmup},
       {"target_sync", c.target_sync},
       {"epsilon_start", c.epsilon.start},
       {"epsilon_end", c.epsilon.end},
       {"epsilon_decay_steps", c.epsilon.decay_steps},
       {"eval_every", c.eval_every},
       {"eval_episodes", c.eval_episodes},
       {"checkpoint_every", c.checkpoint_every},
       {"seed", c.seed},
       {"tau_seed", c.tau_seed},
       {"variant", to_string(c.variant)},
       {"conditional_states", conditional_label(c.conditional_states)},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "map",           "map_text",     "roster",          "objects_per_type",    "horizon",    "episodes",
      "gamma",         "lr",           "grad_clip",       "batch_size",          "replay_capacity",
      "warmup",        "target_sync",  "epsilon_start",   "epsilon_end",         "epsilon_decay_steps",
      "eval_every",    "eval_episodes", "checkpoint_every", "seed",              "tau_seed",   "variant",
      "conditional_states", "model"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig d;
  c.map_path = j.value("map", d.map_path);
  c.map_text = j.value("map_text", d.map_text);
  c.roster = j.contains("roster") ? j["roster"].get<std::vector<env::AgentSpec>>() : d.roster;
  c.objects_per_type = j.value("objects_per_type", d.objects_per_type);
  c.horizon = j.value("horizon", d.horizon);
  c.episodes = j.value("episodes", d.episodes);
  c.gamma = j.value("gamma", d.gamma);
  c.lr = j.value("lr", d.lr);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.replay_capacity = j.value("replay_capacity", d.replay_capacity);
  c.warmup = j.value("warmup", d.warmup);
  c.target_sync = j.value("target_sync", d.target_sync);
  c.epsilon.start = j.value("epsilon_start", d.epsilon.start);
  c.epsilon.end = j.value("epsilon_end", d.epsilon.end);
  c.epsilon.decay_steps = j.value("epsilon_decay_steps", d.epsilon.decay_steps);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.seed = j.value("seed", d.seed);
  c.tau_seed = j.value("tau_seed", d.tau_seed);
  c.variant = parse_variant(j.value("variant", to_string(d.variant)));
  c.conditional_states =
      j.contains("conditional_states") ? parse_conditional_states(j["conditional_states"]) : d.conditional_states;
  c.model = j.value("model", d.model);
}

// Reads a config file; a relative "map" path resolves against the file's directory.
inline TrainConfig load_train_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto cfg = j.get<TrainConfig>();
  if (!cfg.map_path.empty() && std::filesystem::path(cfg.map_path).is_relative()) {
    cfg.map_path = (path.parent_path() / cfg.map_path).lexically_normal().string();
  }
  return cfg;
}

inline env::EnvSpec make_env_spec(const TrainConfig& cfg) {
  std::string text = cfg.map_text;
  if (text.empty()) {
    if (cfg.map_path.empty()) throw ConfigError("config names no map");
    text = read_file(cfg.map_path);
  }
  auto spec = env::load_map(text);
  spec.roster = cfg.roster;
  spec.objects_per_type = cfg.objects_per_type;
  spec.horizon = cfg.horizon;
  return spec;
}

inline ModelConfig make_model_config(const TrainConfig& cfg, const env::EnvSpec& spec) {
  const auto& a = cfg.model;
  ModelConfig m;
  m.variant = cfg.variant;
  m.local = a.local;
  m.ff_multiplier = a.ff_multiplier;
  m.head = a.head;
  m.final_norm = a.final_norm;
  if (is_da6(cfg.variant)) {
    for (auto k : cfg.conditional_states) {
      SubmoduleConfig s;
      s.name = env::to_string(k);
      s.channels = env::conditional_channels(k);
      s.height = static_cast<std::size_t>(spec.height);
      s.width = static_cast<std::size_t>(spec.width);
      s.patch = a.cond_patch;
      s.dim = a.cond_dim != 0 ? a.cond_dim : a.local.dim;
      s.heads = a.cond_heads != 0 ? a.cond_heads : a.local.heads;
      s.layers = a.cond_layers;
      m.submodules.push_back(s);
    }
  } else if (!is_attentional(cfg.variant)) {
    m.baseline.hidden = a.baseline_hidden;
    m.baseline.input_length = InputEncoder{&spec, cfg.variant, cfg.conditional_states}.flat_length();
  }
  m.validate();
  return m;
}

inline nlohmann::json env_to_json(const env::EnvSpec& spec) {
  return {{"map_text", spec.map_text},
          {"roster", spec.roster},
          {"objects_per_type", spec.objects_per_type},
          {"horizon", spec.horizon},
          {"reward_object", spec.reward_object},
          {"reward_collision", spec.reward_collision}};
}

inline env::EnvSpec env_from_json(const nlohmann::json& j) {
  auto spec = env::load_map(j.at("map_text").get<std::string>());
  spec.roster = j.at("roster").get<std::vector<env::AgentSpec>>();
  spec.objects_per_type = j.at("objects_per_type").get<std::array<int, env::kObjectTypes>>();
  spec.horizon = j.at("horizon").get<int>();
  spec.reward_object = j.at("reward_object").get<double>();
  spec.reward_collision = j.at("reward_collision").get<double>();
  return spec;
}

// ---------------------------------------------------------------- frozen policies

// The per-agent networks of a checkpoint plus everything needed to run them.
struct PolicySet {
  std::string id;
  env::EnvSpec spec;
  ModelConfig model;
  std::vector<ConditionalKind> kinds;
  std::uint64_t tau_seed = 0;
  std::vector<Network<float>> agents;

  InputEncoder encoder() const { return {&spec, model.variant, kinds}; }
};

inline void append_parameters(std::vector<NamedTensor>& out, const std::string& prefix, const Network<float>& net) {
  for (const auto* p : net.parameters()) out.push_back({prefix + p->name, p->value});
}

inline void restore_parameters(const Checkpoint& ckpt, const std::string& prefix, Network<float>& net) {
  for (auto* p : net.parameters()) {
    const auto* t = ckpt.find(prefix + p->name);
    if (t == nullptr) throw ConfigError("checkpoint lacks tensor '" + prefix + p->name + "'");
    if (t->shape() != p->value.shape()) {
      throw ConfigError("checkpoint tensor '" + prefix + p->name + "' has shape " + shape_string(t->shape()) +
                        ", model expects " + shape_string(p->value.shape()));
    }
    p->value = *t;
  }
}

inline std::string agent_prefix(std::size_t i) { return "agent" + std::to_string(i) + "/"; }

inline nlohmann::json policy_meta(const PolicySet& set) {
  return {{"format", 1},
          {"model", set.model},
          {"env", env_to_json(set.spec)},
          {"conditional_states", conditional_label(set.kinds)},
          {"tau_seed", set.tau_seed},
          {"agents", set.agents.size()}};
}

// Freshly initialized networks, one per roster entry.
inline PolicySet make_policies(const env::EnvSpec& spec, const ModelConfig& model,
                               std::vector<ConditionalKind> kinds, std::uint64_t seed, std::uint64_t tau_seed = 0) {
  PolicySet set;
  set.spec = spec;
  set.model = model;
  set.kinds = std::move(kinds);
  set.tau_seed = tau_seed;
  for (std::size_t i = 0; i < spec.agent_count(); ++i) set.agents.emplace_back(model, derive_seed(seed, 1000 + i));
  return set;
}

inline Checkpoint policy_checkpoint(const PolicySet& set) {
  Checkpoint ckpt;
  ckpt.meta = policy_meta(set);
  for (std::size_t i = 0; i < set.agents.size(); ++i) append_parameters(ckpt.tensors, agent_prefix(i), set.agents[i]);
  return ckpt;
}

inline PolicySet load_policies(const Checkpoint& ckpt, std::string id = {}) {
  PolicySet set;
  set.id = std::move(id);
  const auto& meta = ckpt.meta;
  try {
    set.spec = env_from_json(meta.at("env"));
    set.model = meta.at("model").get<ModelConfig>();
    set.kinds = parse_conditional_states(meta.at("conditional_states"));
    set.tau_seed = meta.value("tau_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint metadata: ") + e.what());
  }
  set.model.validate();
  const std::size_t n = meta.value("agents", set.spec.agent_count());
  if (n != set.spec.agent_count()) throw ConfigError("checkpoint agent count does not match its roster");
  for (std::size_t i = 0; i < n; ++i) {
    Network<float> net(set.model, 0);
    restore_parameters(ckpt, agent_prefix(i), net);
    set.agents.push_back(std::move(net));
  }
  return set;
}

inline PolicySet load_policies(const std::filesystem::path& path) {
  return load_policies(load_checkpoint(path), path.stem().string());
}

// ---------------------------------------------------------------- metrics

struct EpisodeStats {
  int episode = 0;
  std::vector<double> reward;
  std::vector<int> objects;
  std::vector<int> agent_collisions;
  std::vector<int> wall_collisions;
  double epsilon = 0.0;
  double mean_loss = 0.0;

  double total_reward() const { return std::accumulate(reward.begin(), reward.end(), 0.0); }
  int total_objects() const { return std::accumulate(objects.begin(), objects.end(), 0); }
  int total_agent_collisions() const { return std::accumulate(agent_collisions.begin(), agent_collisions.end(), 0); }
  int total_wall_collisions() const { return std::accumulate(wall_collisions.begin(), wall_collisions.end(), 0); }
};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_header(std::size_t agents) {
  std::string h = "episode,total_reward,objects,agent_collisions,wall_collisions,epsilon,mean_loss";
  for (std::size_t i = 0; i < agents; ++i) {
    const auto s = std::to_string(i);
    h += ",reward_" + s + ",objects_" + s + ",agent_collisions_" + s + ",wall_collisions_" + s;
  }
  return h;
}

inline std::string metrics_row(const EpisodeStats& s) {
  std::string r = std::to_string(s.episode) + "," + format_number(s.total_reward()) + "," +
                  std::to_string(s.total_objects()) + "," + std::to_string(s.total_agent_collisions()) + "," +
                  std::to_string(s.total_wall_collisions()) + "," + format_number(s.epsilon) + "," +
                  format_number(s.mean_loss);
  for (std::size_t i = 0; i < s.reward.size(); ++i) {
    r += "," + format_number(s.reward[i]) + "," + std::to_string(s.objects[i]) + "," +
         std::to_string(s.agent_collisions[i]) + "," + std::to_string(s.wall_collisions[i]);
  }
  return r;
}

// Plays one episode; `choose(i, obs)` picks agent i's action.
template <typename Choose, typename OnStep>
EpisodeStats play_episode(const env::EnvSpec& spec, std::uint64_t env_seed, Choose&& choose, OnStep&& on_step) {
  const std::size_t n = spec.agent_count();
  EpisodeStats s;
  s.reward.assign(n, 0.0);
  s.objects.assign(n, 0);
  s.agent_collisions.assign(n, 0);
  s.wall_collisions.assign(n, 0);
  auto state = env::reset(spec, env_seed);
  auto obs = env::observe_all(spec, state);
  std::vector<Action> actions(n);
  bool done = false;
  while (!done) {
    for (std::size_t i = 0; i < n; ++i) actions[i] = static_cast<Action>(choose(i, obs[i]));
    auto result = env::step(spec, state, actions);
    for (std::size_t i = 0; i < n; ++i) {
      s.reward[i] += result.rewards[i];
      s.objects[i] += result.info.collected[i];
      s.agent_collisions[i] += result.info.agent_collisions[i];
      s.wall_collisions[i] += result.info.wall_collisions[i];
    }
    on_step(obs, actions, result);
    done = result.done;
    obs = std::move(result.observations);
  }
  return s;
}

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

inline MetricSummary summarize(const std::vector<double>& xs) {
  MetricSummary m;
  if (xs.empty()) return m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - m.mean) * (x - m.mean);
    m.stddev = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  }
  return m;
}

// Mean and sample std over episodes of the episode totals across agents.
struct EvalSummary {
  int episodes = 0;
  MetricSummary reward, objects, agent_collisions, wall_collisions;

  nlohmann::json to_json() const {
    auto f = [](const MetricSummary& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.stddev}}; };
    return {{"episodes", episodes},
            {"episode_reward", f(reward)},
            {"objects", f(objects)},
            {"agent_collisions", f(agent_collisions)},
            {"wall_collisions", f(wall_collisions)}};
  }

  std::string table() const {
    std::string out = "episode_reward,objects,agent_collisions,wall_collisions\n";
    auto cell = [](const MetricSummary& m) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.2f +- %.2f", m.mean, m.stddev);
      return std::string(buf);
    };
    out += cell(reward) + "," + cell(objects) + "," + cell(agent_collisions) + "," + cell(wall_collisions) + "\n";
    return out;
  }
};

inline EvalSummary summarize_episodes(const std::vector<EpisodeStats>& eps) {
  std::vector<double> r, o, ac, wc;
  for (const auto& e : eps) {
    r.push_back(e.total_reward());
    o.push_back(e.total_objects());
    ac.push_back(e.total_agent_collisions());
    wc.push_back(e.total_wall_collisions());
  }
  return {static_cast<int>(eps.size()), summarize(r), summarize(o), summarize(ac), summarize(wc)};
}

inline std::uint64_t eval_episode_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, 3'000'000 + static_cast<std::uint64_t>(episode));
}

// Greedy rollouts of every agent's policy.
inline std::vector<EpisodeStats> greedy_rollouts(const PolicySet& set, int episodes, std::uint64_t seed) {
  const auto enc = set.encoder();
  std::vector<EpisodeStats> out;
  for (int e = 0; e < episodes; ++e) {
    auto stats = play_episode(
        set.spec, eval_episode_seed(seed, e),
        [&](std::size_t i, const Observation& obs) {
          return argmax_action(forward_policy(set.agents[i], enc.encode<float>(obs), set.tau_seed).scores);
        },
        [](auto&&...) {});
    stats.episode = e + 1;
    out.push_back(std::move(stats));
  }
  return out;
}

inline EvalSummary evaluate(const PolicySet& set, int episodes, std::uint64_t seed) {
  return summarize_episodes(greedy_rollouts(set, episodes, seed));
}

// Uniform random actions; the baseline the smoke criterion is measured against.
inline EvalSummary evaluate_random(const env::EnvSpec& spec, int episodes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 4'000'000));
  std::uniform_int_distribution<std::size_t> pick(0, kActionCount - 1);
  std::vector<EpisodeStats> out;
  for (int e = 0; e < episodes; ++e) {
    out.push_back(play_episode(
        spec, eval_episode_seed(seed, e), [&](std::size_t, const Observation&) { return pick(rng); },
        [](auto&&...) {}));
  }
  return summarize_episodes(out);
}

// ---------------------------------------------------------------- trainer

struct Learner {
  Network<float> online;
  Network<float> target;
  Adam<float> optimizer;
  ReplayBuffer replay;
  Rng rng;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    spec_ = make_env_spec(cfg_);
    model_ = make_model_config(cfg_, spec_);
    const std::vector<ConditionalKind> kinds = is_attentional(cfg_.variant) && !is_da6(cfg_.variant)
                                                   ? std::vector<ConditionalKind>{}
                                                   : cfg_.conditional_states;
    policies_ = make_policies(spec_, model_, kinds, cfg_.seed, cfg_.tau_seed);
    for (std::size_t i = 0; i < spec_.agent_count(); ++i) {
      Learner l{policies_.agents[i], policies_.agents[i], {}, ReplayBuffer(cfg_.replay_capacity),
                Rng(derive_seed(cfg_.seed, 2000 + i))};
      l.optimizer = Adam<float>(adam_options(), l.online.parameters());
      learners_.push_back(std::move(l));
    }
    policies_.agents.clear();
  }

  // Restores a run saved with checkpoint(). The replay buffers start empty.
  static Trainer resume(const Checkpoint& ckpt) {
    const auto& meta = ckpt.meta;
    if (!meta.contains("train")) throw ConfigError("checkpoint holds no training state");
    const auto& tr = meta["train"];
    Trainer t(tr.at("config").get<TrainConfig>());
    t.episode_ = tr.at("episode").get<int>();
    t.steps_ = tr.at("steps").get<std::uint64_t>();
    const auto rngs = tr.at("rng").get<std::vector<std::string>>();
    const auto adam_steps = tr.at("adam_steps").get<std::vector<std::uint64_t>>();
    if (rngs.size() != t.learners_.size() || adam_steps.size() != t.learners_.size()) {
      throw ConfigError("checkpoint training state does not match the roster");
    }
    for (std::size_t i = 0; i < t.learners_.size(); ++i) {
      auto& l = t.learners_[i];
      const auto p = agent_prefix(i);
      restore_parameters(ckpt, p, l.online);
      restore_parameters(ckpt, p + "target/", l.target);
      auto params = l.online.parameters();
      for (std::size_t k = 0; k < params.size(); ++k) {
        const auto* m = ckpt.find(p + "adam.m/" + params[k]->name);
        const auto* v = ckpt.find(p + "adam.v/" + params[k]->name);
        if (m == nullptr || v == nullptr) throw ConfigError("checkpoint lacks optimizer state for " + params[k]->name);
        l.optimizer.first_moments()[k] = *m;
        l.optimizer.second_moments()[k] = *v;
      }
      l.optimizer.set_steps(adam_steps[i]);
      l.rng = rng_from_state(rngs[i]);
    }
    return t;
  }

  const TrainConfig& config() const { return cfg_; }
  const env::EnvSpec& spec() const { return spec_; }
  const ModelConfig& model() const { return model_; }
  int episode() const { return episode_; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<Learner>& learners() const { return learners_; }
  InputEncoder encoder() const { return {&spec_, model_.variant, kinds()}; }

  std::vector<ConditionalKind> kinds() const {
    return is_attentional(cfg_.variant) && !is_da6(cfg_.variant) ? std::vector<ConditionalKind>{}
                                                                 : cfg_.conditional_states;
  }

  double epsilon() const { return cfg_.epsilon.at(steps_); }

  // Runs one training episode.
  EpisodeStats run_episode() {
    const auto enc = encoder();
    const std::size_t n = learners_.size();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    auto choose = [&](std::size_t i, const Observation& obs) {
      auto& l = learners_[i];
      return select_action(epsilon(), l.rng, [&] {
        return forward_policy(l.online, enc.encode<float>(obs), cfg_.tau_seed).scores;
      });
    };
    auto on_step = [&](const std::vector<Observation>& obs, const std::vector<Action>& actions,
                       const env::StepResult& result) {
      for (std::size_t i = 0; i < n; ++i) {
        learners_[i].replay.push({obs[i], static_cast<std::uint8_t>(actions[i]), static_cast<float>(result.rewards[i]),
                                  result.observations[i], result.done});
      }
      ++steps_;
      for (auto& l : learners_) {
        if (l.replay.size() < std::max<std::size_t>(cfg_.warmup, 1)) continue;
        const double loss = update(l, enc);
        if (!std::isfinite(loss)) throw ContractError("training loss diverged at step " + std::to_string(steps_));
        loss_sum += loss;
        ++loss_count;
      }
      if (steps_ % cfg_.target_sync == 0) {
        for (auto& l : learners_) l.target.copy_values_from(l.online);
      }
    };
    auto stats = play_episode(spec_, derive_seed(cfg_.seed, 1'000'000 + static_cast<std::uint64_t>(episode_)),
                              choose, on_step);
    ++episode_;
    stats.episode = episode_;
    stats.epsilon = epsilon();
    stats.mean_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    return stats;
  }

  // One gradient step on a sampled minibatch; returns the batch loss.
  double update(Learner& l, const InputEncoder& enc) {
    const auto batch = l.replay.sample(cfg_.batch_size, l.rng);
    l.online.zero_grad();
    const double loss = is_iqn(model_.variant)
                            ? iqn_quantile_huber_loss<float>(batch, l.online, l.target, cfg_.gamma, enc, l.rng)
                            : dqn_loss<float>(batch, l.online, l.target, cfg_.gamma, enc);
    l.optimizer.step(l.online.parameters());
    return loss;
  }

  PolicySet policies() const {
    PolicySet set;
    set.spec = spec_;
    set.model = model_;
    set.kinds = kinds();
    set.tau_seed = cfg_.tau_seed;
    for (const auto& l : learners_) set.agents.push_back(l.online);
    return set;
  }

  // Online weights plus, when `full`, target weights, optimizer moments and
  // RNG state for resuming.
  Checkpoint checkpoint(bool full = true) const {
    auto set = policies();
    Checkpoint ckpt = policy_checkpoint(set);
    if (!full) return ckpt;
    std::vector<std::string> rngs;
    std::vector<std::uint64_t> adam_steps;
    for (std::size_t i = 0; i < learners_.size(); ++i) {
      const auto& l = learners_[i];
      const auto p = agent_prefix(i);
      append_parameters(ckpt.tensors, p + "target/", l.target);
      const auto params = l.online.parameters();
      for (std::size_t k = 0; k < params.size(); ++k)
        ckpt.tensors.push_back({p + "adam.m/" + params[k]->name, l.optimizer.first_moments()[k]});
      for (std::size_t k = 0; k < params.size(); ++k)
        ckpt.tensors.push_back({p + "adam.v/" + params[k]->name, l.optimizer.second_moments()[k]});
      rngs.push_back(rng_state(l.rng));
      adam_steps.push_back(l.optimizer.steps());
    }
    ckpt.meta["train"] = {{"config", cfg_}, {"episode", episode_}, {"steps", steps_}, {"rng", rngs},
                          {"adam_steps", adam_steps}};
    return ckpt;
  }

  // Trains until cfg.episodes, appending to <out>/metrics.csv and writing
  // <out>/checkpoint.ckpt periodically and at the end.
  void run(const std::filesystem::path& out_dir, std::ostream* log = nullptr) {
    std::filesystem::create_directories(out_dir);
    const auto metrics_path = out_dir / "metrics.csv";
    std::ofstream metrics;
    if (episode_ == 0) {
      metrics.open(metrics_path, std::ios::trunc);
      metrics << metrics_header(learners_.size()) << "\n";
    } else {
      metrics.open(metrics_path, std::ios::app);
    }
    if (!metrics) throw ConfigError("cannot write " + metrics_path.string());
    const auto ckpt_path = out_dir / "checkpoint.ckpt";
    while (episode_ < cfg_.episodes) {
      const auto stats = run_episode();
      metrics << metrics_row(stats) << "\n";
      metrics.flush();
      if (log != nullptr) {
        *log << "episode " << stats.episode << " reward " << format_number(stats.total_reward()) << " epsilon "
             << format_number(stats.epsilon) << " loss " << format_number(stats.mean_loss) << "\n";
      }
      if (cfg_.eval_every > 0 && episode_ % cfg_.eval_every == 0 && log != nullptr) {
        *log << "eval @" << episode_ << "\n" << evaluate(policies(), cfg_.eval_episodes, cfg_.seed).table();
      }
      if (cfg_.checkpoint_every > 0 && episode_ % cfg_.checkpoint_every == 0) save_checkpoint(ckpt_path, checkpoint());
    }
    save_checkpoint(ckpt_path, checkpoint());
  }

 private:
  AdamOptions adam_options() const {
    AdamOptions o;
    o.lr = cfg_.lr;
    o.clip_norm = cfg_.grad_clip;
    return o;
  }

  TrainConfig cfg_;
  env::EnvSpec spec_;
  ModelConfig model_;
  PolicySet policies_;
  std::vector<Learner> learners_;
  int episode_ = 0;
  std::uint64_t steps_ = 0;
};

}  // namespace da6::train
