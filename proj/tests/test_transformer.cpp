#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "da6/transformer.hpp"

using namespace da6;
using namespace da6::nn;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

TEST(Attention, UniformWhenKeysAreEqual) {
  Graph<double> g;
  auto q = g.constant(Tensor<double>(Shape{3, 2}, {1, 0, 0, 1, 2, 2}));
  auto k = g.constant(Tensor<double>(Shape{4, 2}, 0.5));
  auto v = g.constant(Tensor<double>(Shape{4, 1}, {1, 2, 3, 4}));
  auto r = scaled_dot_product_attention(q, k, v);
  for (double w : r.weights.value().data()) EXPECT_NEAR(w, 0.25, 1e-15);
  for (double o : r.output.value().data()) EXPECT_NEAR(o, 2.5, 1e-12);
}

TEST(Attention, ShapeErrors) {
  Graph<double> g;
  auto q = g.constant(Tensor<double>(Shape{3, 2}));
  EXPECT_THROW(scaled_dot_product_attention(q, g.constant(Tensor<double>(Shape{3, 3})), q), ShapeError);
  EXPECT_THROW(scaled_dot_product_attention(q, q, g.constant(Tensor<double>(Shape{2, 2}))), ShapeError);
}

// Scalar reference for one attention head.
TEST(Attention, MatchesScalarFormula) {
  std::mt19937_64 rng(5);
  auto q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 2}, rng);
  Graph<double> g;
  auto r = scaled_dot_product_attention(g.constant(q), g.constant(k), g.constant(v));
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> s(5);
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t d = 0; d < 4; ++d) s[j] += q.at(i, d) * k.at(j, d);
      s[j] /= 2.0;
      mx = std::max(mx, s[j]);
    }
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(r.weights.value().at(i, j), s[j] / z, 1e-12);
    for (std::size_t c = 0; c < 2; ++c) {
      double o = 0;
      for (std::size_t j = 0; j < 5; ++j) o += s[j] / z * v.at(j, c);
      EXPECT_NEAR(r.output.value().at(i, c), o, 1e-12);
    }
  }
}

TEST(MultiHead, HeadsMustDivideWidth) {
  Rng rng(1);
  EXPECT_THROW(AttentionParams<double>("a", 6, 4, rng), ConfigError);
  EXPECT_NO_THROW(AttentionParams<double>("a", 8, 4, rng));
}

TEST(MultiHead, CaptureHasOneRowStochasticMatrixPerHead) {
  Rng rng(2);
  AttentionParams<double> p("a", 8, 4, rng);
  std::mt19937_64 r(3);
  Graph<double> g;
  std::vector<Tensor<double>> heads;
  auto y = multi_head_attention(g, g.constant(random_tensor({6, 8}, r)), p, &heads);
  EXPECT_EQ(y.shape(), (Shape{6, 8}));
  ASSERT_EQ(heads.size(), 4u);
  for (const auto& h : heads) {
    ASSERT_EQ(h.shape(), (Shape{6, 6}));
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_GE(h.at(i, j), 0.0);
        s += h.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(EncoderLayer, PreservesShapeAndRejectsWrongWidth) {
  Rng rng(4);
  EncoderLayerParams<double> p("l", 8, 2, 16, rng);
  std::mt19937_64 r(5);
  Graph<double> g;
  EXPECT_EQ(transformer_encoder_layer(g, g.constant(random_tensor({7, 8}, r)), p).shape(), (Shape{7, 8}));
  EXPECT_THROW(transformer_encoder_layer(g, g.constant(random_tensor({7, 6}, r)), p), ShapeError);
}

TEST(EncoderLayer, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  EncoderLayerParams<double> p("l", 4, 2, 8, rng);
  std::mt19937_64 r(7);
  auto x = random_tensor({5, 4}, r);
  auto proj = random_tensor({5, 4}, r);
  std::vector<Parameter<double>*> params;
  p.visit([&](Parameter<double>& q) { params.push_back(&q); });
  auto f = [&](Graph<double>& g) {
    return ad::sum(ad::mul(transformer_encoder_layer(g, g.constant(x), p), g.constant(proj)));
  };
  EXPECT_LT(ad::grad_check_parameters(f, params), 1e-4);
  EXPECT_LT(ad::grad_check(
                [&](Graph<double>& g, Var<double> v) {
                  return ad::sum(ad::mul(transformer_encoder_layer(g, v, p), g.constant(proj)));
                },
                x),
            1e-4);
}

TEST(Patchify, LayoutMatchesDefinition) {
  // 1 channel, 4x4 map, P=2: value = 10*y + x.
  Tensor<float> map(Shape{1, 4, 4});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) map[y * 4 + x] = static_cast<float>(10 * y + x);
  auto t = patchify(map, 2);
  ASSERT_EQ(t.shape(), (Shape{4, 4}));
  EXPECT_EQ(t.storage(), (std::vector<float>{0, 1, 10, 11, 2, 3, 12, 13, 20, 21, 30, 31, 22, 23, 32, 33}));
}

TEST(Patchify, RoundTripsForRandomShapes) {
  std::mt19937_64 rng(8);
  for (std::size_t patch : {1u, 2u, 3u, 5u}) {
    for (std::size_t ch : {1u, 2u, 5u}) {
      const std::size_t h = patch * 3, w = patch * 2;
      Tensor<float> map(Shape{ch, h, w});
      for (auto& v : map.data()) v = static_cast<float>(rng() % 1000);
      auto tokens = patchify(map, patch);
      EXPECT_EQ(tokens.shape(), (Shape{6, patch * patch * ch}));
      EXPECT_EQ(unpatchify(tokens, ch, h, w, patch), map);
    }
  }
}

TEST(Patchify, PatchMustDivideMap) {
  Tensor<float> map(Shape{1, 25, 25});
  EXPECT_THROW(patchify(map, 4), ConfigError);
  EXPECT_EQ(patchify(map, 5).shape(), (Shape{25, 25}));
}
