#pragma once

// Multi-head self-attention and pre-norm transformer encoder layers, with
// optional capture of every head's attention matrix.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "da6/autodiff.hpp"

namespace da6::nn {

using ad::Graph;
using ad::Parameter;
using ad::Var;
using Rng = std::mt19937_64;

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Glorot-uniform matrix of shape rows x cols.
template <typename T>
Tensor<T> xavier_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> t(Shape{rows, cols});
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Linear {
  Parameter<T> weight;  // in x out
  Parameter<T> bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", xavier_tensor<T>(in, out, rng)), bias(name + ".bias", Tensor<T>(Shape{1, out})) {}

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    return ad::affine(x, g.parameter(weight), g.parameter(bias));
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
  template <typename F>
  void visit(F&& f) const {
    f(weight);
    f(bias);
  }
};

// Per-head projections W_Q, W_K, W_V (C x C/h each) and the output projection W_O (C x C).
template <typename T>
struct AttentionParams {
  std::size_t heads = 1;
  std::vector<Parameter<T>> query;
  std::vector<Parameter<T>> key;
  std::vector<Parameter<T>> value;
  Parameter<T> output;

  AttentionParams() = default;
  AttentionParams(const std::string& name, std::size_t dim, std::size_t head_count, Rng& rng) : heads(head_count) {
    if (head_count == 0 || dim % head_count != 0) {
      throw ConfigError("attention: " + std::to_string(head_count) + " heads do not divide width " +
                        std::to_string(dim));
    }
    const std::size_t d = dim / head_count;
    for (std::size_t l = 0; l < head_count; ++l) {
      const auto tag = std::to_string(l);
      query.emplace_back(name + ".wq" + tag, xavier_tensor<T>(dim, d, rng));
      key.emplace_back(name + ".wk" + tag, xavier_tensor<T>(dim, d, rng));
      value.emplace_back(name + ".wv" + tag, xavier_tensor<T>(dim, d, rng));
    }
    output = Parameter<T>(name + ".wo", xavier_tensor<T>(dim, dim, rng));
  }

  std::size_t dim() const { return output.value.dim(0); }
  std::size_t head_dim() const { return dim() / heads; }

  template <typename F>
  void visit(F&& f) {
    for (std::size_t l = 0; l < heads; ++l) {
      f(query[l]);
      f(key[l]);
      f(value[l]);
    }
    f(output);
  }
  template <typename F>
  void visit(F&& f) const {
    for (std::size_t l = 0; l < heads; ++l) {
      f(query[l]);
      f(key[l]);
      f(value[l]);
    }
    f(output);
  }
};

template <typename T>
struct EncoderLayerParams {
  Parameter<T> norm1_gain, norm1_bias;
  AttentionParams<T> attention;
  Parameter<T> norm2_gain, norm2_bias;
  Linear<T> mlp_in;   // C -> C_ff
  Linear<T> mlp_out;  // C_ff -> C

  EncoderLayerParams() = default;
  EncoderLayerParams(const std::string& name, std::size_t dim, std::size_t heads, std::size_t ff_dim, Rng& rng)
      : norm1_gain(name + ".ln1.gain", Tensor<T>(Shape{dim}, T(1))),
        norm1_bias(name + ".ln1.bias", Tensor<T>(Shape{dim})),
        attention(name + ".attn", dim, heads, rng),
        norm2_gain(name + ".ln2.gain", Tensor<T>(Shape{dim}, T(1))),
        norm2_bias(name + ".ln2.bias", Tensor<T>(Shape{dim})),
        mlp_in(name + ".mlp.fc1", dim, ff_dim, rng),
        mlp_out(name + ".mlp.fc2", ff_dim, dim, rng) {}

  std::size_t dim() const { return attention.dim(); }

  template <typename F>
  void visit(F&& f) {
    f(norm1_gain);
    f(norm1_bias);
    attention.visit(f);
    f(norm2_gain);
    f(norm2_bias);
    mlp_in.visit(f);
    mlp_out.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    f(norm1_gain);
    f(norm1_bias);
    attention.visit(f);
    f(norm2_gain);
    f(norm2_bias);
    mlp_in.visit(f);
    mlp_out.visit(f);
  }
};

// Attention matrices of one encoder: layers[l][h] is an n x n row-stochastic matrix.
template <typename T>
struct AttentionRecord {
  std::string encoder;
  std::vector<std::vector<Tensor<T>>> layers;
};

template <typename T>
using AttentionRecords = std::vector<AttentionRecord<T>>;

template <typename T>
const AttentionRecord<T>* find_record(const AttentionRecords<T>& records, const std::string& encoder) {
  for (const auto& r : records)
    if (r.encoder == encoder) return &r;
  return nullptr;
}

template <typename T>
struct AttentionResult {
  Var<T> output;
  Var<T> weights;
};

// softmax(Q K^T / sqrt(d)) V, row-wise.
template <typename T>
AttentionResult<T> scaled_dot_product_attention(Var<T> q, Var<T> k, Var<T> v) {
  const auto& qs = q.shape();
  const auto& ks = k.shape();
  const auto& vs = v.shape();
  if (qs.size() != 2 || ks.size() != 2 || vs.size() != 2) throw ShapeError("attention: expected rank-2 inputs");
  if (qs[1] != ks[1]) {
    throw ShapeError("attention: query/key widths differ " + shape_string(qs) + " vs " + shape_string(ks));
  }
  if (ks[0] != vs[0]) {
    throw ShapeError("attention: key/value lengths differ " + shape_string(ks) + " vs " + shape_string(vs));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qs[1]));
  auto scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d);
  auto weights = ad::softmax(scores, -1);
  return {ad::matmul(weights, v), weights};
}

// Concat(head_1..head_h) W_O with head_l = Attention(x W_l^Q, x W_l^K, x W_l^V).
// When `capture` is non-null, one weight matrix per head is appended to it.
template <typename T>
Var<T> multi_head_attention(Graph<T>& g, Var<T> x, const AttentionParams<T>& p,
                            std::vector<Tensor<T>>* capture = nullptr) {
  if (x.shape().size() != 2 || x.shape()[1] != p.dim()) {
    throw ShapeError("multi_head_attention: input " + shape_string(x.shape()) + " does not match width " +
                     std::to_string(p.dim()));
  }
  std::vector<Var<T>> heads;
  heads.reserve(p.heads);
  for (std::size_t l = 0; l < p.heads; ++l) {
    auto q = ad::matmul(x, g.parameter(p.query[l]));
    auto k = ad::matmul(x, g.parameter(p.key[l]));
    auto v = ad::matmul(x, g.parameter(p.value[l]));
    auto head = scaled_dot_product_attention(q, k, v);
    if (capture != nullptr) capture->push_back(head.weights.value());
    heads.push_back(head.output);
  }
  auto merged = p.heads == 1 ? heads[0] : ad::concat_last(heads);
  return ad::matmul(merged, g.parameter(p.output));
}

// Pre-norm residual layer: x + MHA(LN(x)), then x + MLP(LN(x)) with a GELU MLP.
template <typename T>
Var<T> transformer_encoder_layer(Graph<T>& g, Var<T> x, const EncoderLayerParams<T>& p,
                                 std::vector<Tensor<T>>* capture = nullptr) {
  if (x.shape().size() != 2 || x.shape()[1] != p.dim()) {
    throw ShapeError("encoder layer: input " + shape_string(x.shape()) + " does not match width " +
                     std::to_string(p.dim()));
  }
  auto h = ad::layer_norm(x, g.parameter(p.norm1_gain), g.parameter(p.norm1_bias));
  x = ad::add(x, multi_head_attention(g, h, p.attention, capture));
  h = ad::layer_norm(x, g.parameter(p.norm2_gain), g.parameter(p.norm2_bias));
  h = p.mlp_out(g, ad::gelu(p.mlp_in(g, h)));
  return ad::add(x, h);
}

// Splits a channels x H x W map into (H/P)(W/P) tokens of length P*P*channels.
// Patches run row-major over the patch grid; inside a patch, values are
// channel-major, then row-major: element (c, r, q) of patch (pr, pc) lands at
// token pr*(W/P)+pc, position c*P*P + r*P + q.
template <typename T>
Tensor<T> patchify(const Tensor<T>& map, std::size_t patch) {
  if (map.rank() != 3) throw ShapeError("patchify: expected channels x H x W, got " + shape_string(map.shape()));
  const std::size_t ch = map.dim(0), h = map.dim(1), w = map.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patchify: patch size " + std::to_string(patch) + " does not divide " + std::to_string(h) +
                      "x" + std::to_string(w));
  }
  const std::size_t gw = w / patch, tokens = (h / patch) * gw, len = patch * patch * ch;
  Tensor<T> out(Shape{tokens, len});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t token = (y / patch) * gw + x / patch;
        const std::size_t pos = c * patch * patch + (y % patch) * patch + x % patch;
        out[token * len + pos] = map[(c * h + y) * w + x];
      }
  return out;
}

// Exact inverse of patchify.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t channels, std::size_t height, std::size_t width,
                     std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("unpatchify: patch size does not divide the map");
  }
  const std::size_t gw = width / patch, len = patch * patch * channels;
  if (tokens.rank() != 2 || tokens.dim(0) != (height / patch) * gw || tokens.dim(1) != len) {
    throw ShapeError("unpatchify: token shape " + shape_string(tokens.shape()) + " does not match map");
  }
  Tensor<T> map(Shape{channels, height, width});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t token = (y / patch) * gw + x / patch;
        const std::size_t pos = c * patch * patch + (y % patch) * patch + x % patch;
        map[(c * height + y) * width + x] = tokens[token * len + pos];
      }
  return map;
}

}  // namespace da6::nn
