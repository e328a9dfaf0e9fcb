#pragma once

// The conditional-attention policy network and its degenerate variants.
//
//   conditional maps --patchify--> per-submodule encoders --token 0--> vector integration --> v
//   local view --patchify--> [phi(v); y E] + P --> local encoder --token 0--> norm --> head
//
// DA3 variants are the same network with no conditional submodules: the local
// encoder's lead token is then a trainable saliency parameter. Plain DQN/IQN
// variants bypass the transformers and run an MLP over a flat input.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "da6/autodiff.hpp"
#include "da6/transformer.hpp"

namespace da6 {

enum class Variant { Dqn, Iqn, Da3Dqn, Da3Iqn, Da6Dqn, Da6Iqn };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Dqn: return "DQN";
    case Variant::Iqn: return "IQN";
    case Variant::Da3Dqn: return "DA3-DQN";
    case Variant::Da3Iqn: return "DA3-IQN";
    case Variant::Da6Dqn: return "DA6-DQN";
    case Variant::Da6Iqn: return "DA6-IQN";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  for (auto v : {Variant::Dqn, Variant::Iqn, Variant::Da3Dqn, Variant::Da3Iqn, Variant::Da6Dqn, Variant::Da6Iqn})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown model variant '" + name + "'");
}

inline bool is_iqn(Variant v) { return v == Variant::Iqn || v == Variant::Da3Iqn || v == Variant::Da6Iqn; }
inline bool is_attentional(Variant v) { return v != Variant::Dqn && v != Variant::Iqn; }
inline bool is_da6(Variant v) { return v == Variant::Da6Dqn || v == Variant::Da6Iqn; }

// Actions in fixed order.
enum class Action : std::uint8_t { Up = 0, Down = 1, Right = 2, Left = 3 };
inline constexpr std::size_t kActionCount = 4;
inline constexpr std::array<const char*, kActionCount> kActionNames = {"up", "down", "right", "left"};

struct SubmoduleConfig {
  std::string name;
  std::size_t channels = 1;
  std::size_t height = 25;
  std::size_t width = 25;
  std::size_t patch = 5;
  std::size_t dim = 64;
  std::size_t layers = 1;
  std::size_t heads = 4;

  std::size_t tokens() const { return (height / patch) * (width / patch); }
  std::size_t token_length() const { return patch * patch * channels; }

  void validate() const {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
      throw ConfigError("submodule '" + name + "': patch " + std::to_string(patch) + " does not divide " +
                        std::to_string(height) + "x" + std::to_string(width));
    }
    if (heads == 0 || dim % heads != 0) throw ConfigError("submodule '" + name + "': heads must divide dim");
    if (layers == 0) throw ConfigError("submodule '" + name + "': needs at least one layer");
  }
};

struct LocalConfig {
  std::size_t channels = 5;
  std::size_t view = 7;
  std::size_t patch = 1;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;

  std::size_t tokens() const { return (view / patch) * (view / patch); }
  std::size_t token_length() const { return patch * patch * channels; }
};

struct HeadConfig {
  std::size_t hidden = 64;
  std::size_t cosine_features = 64;
  std::size_t train_quantiles = 8;
  std::size_t target_quantiles = 8;
  std::size_t eval_quantiles = 32;
  double kappa = 1.0;
};

struct BaselineConfig {
  std::size_t input_length = 0;
  std::vector<std::size_t> hidden = {256, 128};
};

struct ModelConfig {
  Variant variant = Variant::Da6Dqn;
  std::vector<SubmoduleConfig> submodules;
  LocalConfig local;
  std::size_t ff_multiplier = 2;
  HeadConfig head;
  BaselineConfig baseline;
  bool final_norm = true;

  std::size_t conditional_count() const { return submodules.size(); }

  void validate() const {
    if (!is_da6(variant) && !submodules.empty()) {
      throw ConfigError(to_string(variant) + " has no conditional module; submodules must be empty");
    }
    for (const auto& s : submodules) s.validate();
    if (is_attentional(variant)) {
      if (local.patch == 0 || local.view % local.patch != 0) throw ConfigError("local patch does not divide view");
      if (local.heads == 0 || local.dim % local.heads != 0) throw ConfigError("local heads must divide dim");
      if (local.layers == 0) throw ConfigError("local encoder needs at least one layer");
    } else if (baseline.input_length == 0 || baseline.hidden.empty()) {
      throw ConfigError("baseline MLP needs an input length and hidden sizes");
    }
    if (head.kappa <= 0.0) throw ConfigError("kappa must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SubmoduleConfig& s) {
  j = {{"name", s.name},   {"channels", s.channels}, {"height", s.height}, {"width", s.width},
       {"patch", s.patch}, {"dim", s.dim},           {"layers", s.layers}, {"heads", s.heads}};
}
inline void from_json(const nlohmann::json& j, SubmoduleConfig& s) {
  SubmoduleConfig d;
  s.name = j.at("name").get<std::string>();
  s.channels = j.value("channels", d.channels);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.patch = j.value("patch", d.patch);
  s.dim = j.value("dim", d.dim);
  s.layers = j.value("layers", d.layers);
  s.heads = j.value("heads", d.heads);
}
inline void to_json(nlohmann::json& j, const LocalConfig& l) {
  j = {{"channels", l.channels}, {"view", l.view},     {"patch", l.patch},
       {"dim", l.dim},           {"layers", l.layers}, {"heads", l.heads}};
}
inline void from_json(const nlohmann::json& j, LocalConfig& l) {
  LocalConfig d;
  l.channels = j.value("channels", d.channels);
  l.view = j.value("view", d.view);
  l.patch = j.value("patch", d.patch);
  l.dim = j.value("dim", d.dim);
  l.layers = j.value("layers", d.layers);
  l.heads = j.value("heads", d.heads);
}
inline void to_json(nlohmann::json& j, const HeadConfig& h) {
  j = {{"hidden", h.hidden},
       {"cosine_features", h.cosine_features},
       {"train_quantiles", h.train_quantiles},
       {"target_quantiles", h.target_quantiles},
       {"eval_quantiles", h.eval_quantiles},
       {"kappa", h.kappa}};
}
inline void from_json(const nlohmann::json& j, HeadConfig& h) {
  HeadConfig d;
  h.hidden = j.value("hidden", d.hidden);
  h.cosine_features = j.value("cosine_features", d.cosine_features);
  h.train_quantiles = j.value("train_quantiles", d.train_quantiles);
  h.target_quantiles = j.value("target_quantiles", d.target_quantiles);
  h.eval_quantiles = j.value("eval_quantiles", d.eval_quantiles);
  h.kappa = j.value("kappa", d.kappa);
}
inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"variant", to_string(m.variant)},
       {"submodules", m.submodules},
       {"local", m.local},
       {"ff_multiplier", m.ff_multiplier},
       {"head", m.head},
       {"baseline", {{"input_length", m.baseline.input_length}, {"hidden", m.baseline.hidden}}},
       {"final_norm", m.final_norm}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  ModelConfig d;
  m.variant = parse_variant(j.value("variant", to_string(d.variant)));
  m.submodules = j.value("submodules", std::vector<SubmoduleConfig>{});
  m.local = j.value("local", d.local);
  m.ff_multiplier = j.value("ff_multiplier", d.ff_multiplier);
  m.head = j.value("head", d.head);
  if (j.contains("baseline")) {
    m.baseline.input_length = j["baseline"].value("input_length", std::size_t{0});
    m.baseline.hidden = j["baseline"].value("hidden", d.baseline.hidden);
  }
  m.final_norm = j.value("final_norm", d.final_norm);
}

// Inputs for one forward pass. `local` is channels x view x view; `conditional`
// holds one map per submodule (channels x H x W); `flat` feeds the baseline MLP.
template <typename T>
struct PolicyInput {
  Tensor<T> local;
  std::vector<Tensor<T>> conditional;
  Tensor<T> flat;
};

// Cosine features cos(pi * i * tau), i = 0..n-1, one row per tau.
template <typename T>
Tensor<T> cosine_features(std::span<const T> taus, std::size_t n) {
  Tensor<T> out(Shape{taus.size(), n});
  for (std::size_t r = 0; r < taus.size(); ++r)
    for (std::size_t i = 0; i < n; ++i)
      out[r * n + i] = static_cast<T>(std::cos(std::numbers::pi * static_cast<double>(i) * static_cast<double>(taus[r])));
  return out;
}

// Evaluation quantile fractions drawn uniformly from (0,1) with a fixed seed.
template <typename T>
std::vector<T> sample_taus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<T> taus;
  taus.reserve(n);
  while (taus.size() < n) {
    const T t = static_cast<T>(dist(rng));
    if (t > T(0) && t < T(1)) taus.push_back(t);
  }
  return taus;
}

template <typename T>
struct NetworkOutput {
  ad::Var<T> values;                   // 1x4 for DQN heads, N x 4 for IQN heads
  std::optional<ad::Var<T>> saliency;  // v, for attentional variants
};

template <typename T>
class Network {
 public:
  using Param = ad::Parameter<T>;

  struct Submodule {
    SubmoduleConfig config;
    Param saliency;  // u_m, 1 x C_m
    Param embed;     // E_m, (P^2 N) x C_m
    Param position;  // (I_m + 1) x C_m
    std::vector<nn::EncoderLayerParams<T>> layers;
  };

  Network() = default;

  Network(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    nn::Rng rng(seed);
    if (is_attentional(config_.variant)) {
      build_attentional(rng);
    } else {
      build_baseline(rng);
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  Variant variant() const noexcept { return config_.variant; }
  std::size_t head_width() const { return is_attentional(variant()) ? config_.local.dim : config_.baseline.hidden.back(); }

  // g_{m,0} = [u_m; x_m^1 E_m; ...; x_m^I E_m] + P_m
  ad::Var<T> embed_conditional_state(ad::Graph<T>& g, std::size_t m, const Tensor<T>& tokens) const {
    const auto& sub = submodules_.at(m);
    if (tokens.rank() != 2 || tokens.dim(1) != sub.config.token_length() || tokens.dim(0) != sub.config.tokens()) {
      throw ShapeError("submodule '" + sub.config.name + "': tokens " + shape_string(tokens.shape()) + " expected [" +
                       std::to_string(sub.config.tokens()) + "x" + std::to_string(sub.config.token_length()) + "]");
    }
    auto embedded = ad::matmul(g.constant(tokens), g.parameter(sub.embed));
    auto seq = ad::concat_rows<T>({g.parameter(sub.saliency), embedded});
    return ad::add(seq, g.parameter(sub.position));
  }

  // v = W_int concat(g^0_1, ..., g^0_M) + b_int
  ad::Var<T> vector_integration(ad::Graph<T>& g, const std::vector<ad::Var<T>>& saliency_tokens) const {
    if (saliency_tokens.empty()) throw ContractError("vector_integration: empty input list");
    if (saliency_tokens.size() != submodules_.size()) {
      throw ShapeError("vector_integration: expected " + std::to_string(submodules_.size()) + " saliency vectors");
    }
    auto joined = saliency_tokens.size() == 1 ? saliency_tokens[0] : ad::concat_last(saliency_tokens);
    return integration_(g, joined);
  }

  // Runs every conditional submodule and integrates their saliency tokens into v.
  // With no submodules, v is the trainable local saliency token.
  ad::Var<T> run_conditional_module(ad::Graph<T>& g, const std::vector<Tensor<T>>& maps,
                                    nn::AttentionRecords<T>* capture = nullptr) const {
    if (maps.size() != submodules_.size()) {
      throw ShapeError("conditional module: got " + std::to_string(maps.size()) + " maps for " +
                       std::to_string(submodules_.size()) + " submodules");
    }
    if (submodules_.empty()) return g.parameter(local_saliency_);
    std::vector<ad::Var<T>> tokens;
    for (std::size_t m = 0; m < submodules_.size(); ++m) {
      const auto& sub = submodules_[m];
      const auto& map = maps[m];
      if (map.rank() != 3 || map.dim(0) != sub.config.channels || map.dim(1) != sub.config.height ||
          map.dim(2) != sub.config.width) {
        throw ShapeError("submodule '" + sub.config.name + "': map " + shape_string(map.shape()) + " does not match config");
      }
      auto x = embed_conditional_state(g, m, nn::patchify(map, sub.config.patch));
      nn::AttentionRecord<T>* record = nullptr;
      if (capture != nullptr) {
        capture->push_back({sub.config.name, {}});
        record = &capture->back();
      }
      for (const auto& layer : sub.layers) {
        std::vector<Tensor<T>>* heads = nullptr;
        if (record != nullptr) heads = &record->layers.emplace_back();
        x = nn::transformer_encoder_layer(g, x, layer, heads);
      }
      tokens.push_back(ad::slice_token(x, 0));
    }
    return vector_integration(g, tokens);
  }

  // h_0 = [phi(v); y E + ...] + P_local, then the local encoder; returns token 0.
  ad::Var<T> run_local_encoder(ad::Graph<T>& g, ad::Var<T> saliency, const Tensor<T>& local_tokens,
                               nn::AttentionRecords<T>* capture = nullptr) const {
    const auto& lc = config_.local;
    if (local_tokens.rank() != 2 || local_tokens.dim(0) != lc.tokens() || local_tokens.dim(1) != lc.token_length()) {
      throw ShapeError("local encoder: tokens " + shape_string(local_tokens.shape()) + " expected [" +
                       std::to_string(lc.tokens()) + "x" + std::to_string(lc.token_length()) + "]");
    }
    auto lead = submodules_.empty() ? saliency : phi_(g, saliency);
    auto embedded = ad::matmul(g.constant(local_tokens), g.parameter(local_embed_));
    auto x = ad::add(ad::concat_rows<T>({lead, embedded}), g.parameter(local_position_));
    nn::AttentionRecord<T>* record = nullptr;
    if (capture != nullptr) {
      capture->push_back({"local", {}});
      record = &capture->back();
    }
    for (const auto& layer : local_layers_) {
      std::vector<Tensor<T>>* heads = nullptr;
      if (record != nullptr) heads = &record->layers.emplace_back();
      x = nn::transformer_encoder_layer(g, x, layer, heads);
    }
    return ad::slice_token(x, 0);
  }

  ad::Var<T> dqn_head(ad::Graph<T>& g, ad::Var<T> features) const {
    return head_out_(g, ad::relu(head_hidden_(g, features)));
  }

  // Each tau is embedded by relu(Linear(cos features)), multiplied into the
  // features, and mapped through the head MLP: one row of action values per tau.
  ad::Var<T> iqn_head(ad::Graph<T>& g, ad::Var<T> features, std::span<const T> taus) const {
    if (taus.empty()) throw ContractError("iqn_head: no quantile fractions");
    for (auto t : taus) {
      if (!(t > T(0) && t < T(1))) throw ContractError("iqn_head: tau " + std::to_string(t) + " outside (0,1)");
    }
    auto phi_tau = ad::relu(tau_embed_(g, g.constant(cosine_features<T>(taus, config_.head.cosine_features))));
    auto mixed = ad::mul(ad::broadcast_rows(features, taus.size()), phi_tau);
    return head_out_(g, ad::relu(head_hidden_(g, mixed)));
  }

  // Plain MLP trunk over the flat input; the configured head follows.
  ad::Var<T> baseline_trunk(ad::Graph<T>& g, const Tensor<T>& flat) const {
    if (flat.size() != config_.baseline.input_length) {
      throw ShapeError("baseline MLP: input length " + std::to_string(flat.size()) + " expected " +
                       std::to_string(config_.baseline.input_length));
    }
    auto x = g.constant(Tensor<T>(Shape{1, flat.size()}, flat.storage()));
    for (const auto& layer : trunk_) x = ad::relu(layer(g, x));
    return x;
  }

  // Full forward. `taus` is required for IQN variants and ignored otherwise.
  NetworkOutput<T> forward(ad::Graph<T>& g, const PolicyInput<T>& input, std::span<const T> taus = {},
                           nn::AttentionRecords<T>* capture = nullptr) const {
    NetworkOutput<T> out;
    ad::Var<T> features;
    if (is_attentional(variant())) {
      auto v = run_conditional_module(g, input.conditional, capture);
      out.saliency = v;
      features = run_local_encoder(g, v, nn::patchify(input.local, config_.local.patch), capture);
      if (config_.final_norm) features = ad::layer_norm(features, g.parameter(final_gain_), g.parameter(final_bias_));
    } else {
      features = baseline_trunk(g, input.flat);
    }
    out.values = is_iqn(variant()) ? iqn_head(g, features, taus) : dqn_head(g, features);
    return out;
  }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    visit([&](Param& p) { out.push_back(&p); });
    return out;
  }
  std::vector<const Param*> parameters() const {
    std::vector<const Param*> out;
    visit([&](const Param& p) { out.push_back(&p); });
    return out;
  }

  const std::vector<Submodule>& submodules() const { return submodules_; }
  std::vector<Submodule>& submodules() { return submodules_; }
  const std::vector<nn::EncoderLayerParams<T>>& local_layers() const { return local_layers_; }
  std::vector<nn::EncoderLayerParams<T>>& local_layers() { return local_layers_; }
  nn::Linear<T>& integration() { return integration_; }
  const nn::Linear<T>& integration() const { return integration_; }
  nn::Linear<T>& phi() { return phi_; }
  Param& local_saliency() { return local_saliency_; }
  const Param& local_saliency() const { return local_saliency_; }
  Param& local_embed() { return local_embed_; }
  Param& local_position() { return local_position_; }
  nn::Linear<T>& head_hidden() { return head_hidden_; }
  nn::Linear<T>& head_out() { return head_out_; }

  // Copies parameter values from a network with the same configuration.
  void copy_values_from(const Network& other) {
    auto dst = parameters();
    auto src = other.parameters();
    if (dst.size() != src.size()) throw ConfigError("copy_values_from: parameter sets differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i]->value.shape() != src[i]->value.shape()) throw ConfigError("copy_values_from: shape mismatch");
      dst[i]->value = src[i]->value;
    }
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    for (auto& sub : self.submodules_) {
      f(sub.saliency);
      f(sub.embed);
      f(sub.position);
      for (auto& layer : sub.layers) layer.visit(f);
    }
    if (!self.submodules_.empty()) {
      self.integration_.visit(f);
      self.phi_.visit(f);
    }
    if (is_attentional(self.config_.variant)) {
      if (self.submodules_.empty()) f(self.local_saliency_);
      f(self.local_embed_);
      f(self.local_position_);
      for (auto& layer : self.local_layers_) layer.visit(f);
      if (self.config_.final_norm) {
        f(self.final_gain_);
        f(self.final_bias_);
      }
    } else {
      for (auto& layer : self.trunk_) layer.visit(f);
    }
    if (is_iqn(self.config_.variant)) self.tau_embed_.visit(f);
    self.head_hidden_.visit(f);
    self.head_out_.visit(f);
  }

  void build_attentional(nn::Rng& rng) {
    std::size_t integrated = 0;
    for (const auto& sc : config_.submodules) {
      Submodule sub;
      sub.config = sc;
      const std::string prefix = "cm." + sc.name;
      sub.saliency = Param(prefix + ".saliency", nn::normal_tensor<T>(Shape{1, sc.dim}, 0.02, rng));
      sub.embed = Param(prefix + ".embed", nn::xavier_tensor<T>(sc.token_length(), sc.dim, rng));
      sub.position = Param(prefix + ".position", nn::normal_tensor<T>(Shape{sc.tokens() + 1, sc.dim}, 0.02, rng));
      for (std::size_t l = 0; l < sc.layers; ++l) {
        sub.layers.emplace_back(prefix + ".layer" + std::to_string(l), sc.dim, sc.heads,
                                config_.ff_multiplier * sc.dim, rng);
      }
      integrated += sc.dim;
      submodules_.push_back(std::move(sub));
    }
    const auto& lc = config_.local;
    if (!submodules_.empty()) {
      integration_ = nn::Linear<T>("cm.integration", integrated, lc.dim, rng);
      phi_ = nn::Linear<T>("local.phi", lc.dim, lc.dim, rng);
    } else {
      local_saliency_ = Param("local.saliency", nn::normal_tensor<T>(Shape{1, lc.dim}, 0.02, rng));
    }
    local_embed_ = Param("local.embed", nn::xavier_tensor<T>(lc.token_length(), lc.dim, rng));
    local_position_ = Param("local.position", nn::normal_tensor<T>(Shape{lc.tokens() + 1, lc.dim}, 0.02, rng));
    for (std::size_t l = 0; l < lc.layers; ++l) {
      local_layers_.emplace_back("local.layer" + std::to_string(l), lc.dim, lc.heads, config_.ff_multiplier * lc.dim,
                                 rng);
    }
    if (config_.final_norm) {
      final_gain_ = Param("local.final_norm.gain", Tensor<T>(Shape{lc.dim}, T(1)));
      final_bias_ = Param("local.final_norm.bias", Tensor<T>(Shape{lc.dim}));
    }
    build_head(lc.dim, rng);
  }

  void build_baseline(nn::Rng& rng) {
    std::size_t width = config_.baseline.input_length;
    for (std::size_t i = 0; i < config_.baseline.hidden.size(); ++i) {
      trunk_.emplace_back("mlp.fc" + std::to_string(i), width, config_.baseline.hidden[i], rng);
      width = config_.baseline.hidden[i];
    }
    build_head(width, rng);
  }

  void build_head(std::size_t width, nn::Rng& rng) {
    if (is_iqn(config_.variant)) tau_embed_ = nn::Linear<T>("head.tau_embed", config_.head.cosine_features, width, rng);
    head_hidden_ = nn::Linear<T>("head.fc1", width, config_.head.hidden, rng);
    head_out_ = nn::Linear<T>("head.fc2", config_.head.hidden, kActionCount, rng);
  }

  ModelConfig config_;
  std::vector<Submodule> submodules_;
  nn::Linear<T> integration_;
  nn::Linear<T> phi_;
  Param local_saliency_;
  Param local_embed_;
  Param local_position_;
  std::vector<nn::EncoderLayerParams<T>> local_layers_;
  Param final_gain_, final_bias_;
  std::vector<nn::Linear<T>> trunk_;
  nn::Linear<T> tau_embed_;
  nn::Linear<T> head_hidden_;
  nn::Linear<T> head_out_;
};

template <typename T>
struct PolicyOutput {
  std::array<T, kActionCount> scores{};
  nn::AttentionRecords<T> records;
  std::vector<T> saliency;
};

// Greedy action with ties broken toward the lowest index.
template <typename T>
std::size_t argmax_action(const std::array<T, kActionCount>& scores) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < kActionCount; ++a)
    if (scores[a] > scores[best]) best = a;
  return best;
}

// Action scores for one observation. IQN variants average over the evaluation
// quantile set drawn from `tau_seed`.
template <typename T>
PolicyOutput<T> forward_policy(const Network<T>& net, const PolicyInput<T>& input, std::uint64_t tau_seed = 0,
                               bool capture = false) {
  PolicyOutput<T> out;
  ad::Graph<T> g;
  std::vector<T> taus;
  if (is_iqn(net.variant())) taus = sample_taus<T>(net.config().head.eval_quantiles, tau_seed);
  auto result = net.forward(g, input, taus, capture && is_attentional(net.variant()) ? &out.records : nullptr);
  const auto& values = result.values.value();
  const std::size_t rows = values.rows();
  for (std::size_t a = 0; a < kActionCount; ++a) {
    T acc = T(0);
    for (std::size_t r = 0; r < rows; ++r) acc += values.at(r, a);
    out.scores[a] = acc / static_cast<T>(rows);
  }
  if (result.saliency) {
    const auto& v = result.saliency->value();
    out.saliency.assign(v.data().begin(), v.data().end());
  }
  return out;
}

}  // namespace da6
