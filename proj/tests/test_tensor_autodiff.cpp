#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "da6/autodiff.hpp"

using namespace da6;
using namespace da6::ad;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Plain triple loop.
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST(Tensor, RejectsZeroDimension) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, RowsAndCols) {
  Tensor<float> t(Shape{3, 4});
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t.cols(), 4u);
  Tensor<float> v(Shape{5});
  EXPECT_EQ(v.rows(), 1u);
}

TEST(MatMul, MatchesTripleLoop) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> d(1, 9);
    const std::size_t m = d(rng), k = d(rng), n = d(rng);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Graph<double> g;
    const auto c = matmul(g.constant(a), g.constant(b)).value();
    const auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
  }
}

TEST(MatMul, IdentityExample) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  auto b = g.constant(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(a, b).value().storage(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(MatMul, ShapeErrorNamesBothShapes) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
}

TEST(Backward, RequiresScalarLoss) {
  Graph<double> g;
  Parameter<double> p("p", Tensor<double>(Shape{2, 2}, 1.0));
  auto x = g.parameter(p);
  EXPECT_THROW(g.backward(x), ContractError);
}

TEST(Backward, ParameterGradientsAccumulate) {
  Parameter<double> p("p", Tensor<double>(Shape{1, 3}, {1, 2, 3}));
  for (int k = 0; k < 2; ++k) {
    Graph<double> g;
    g.backward(sum(g.parameter(p)));
  }
  for (double v : p.grad.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Replay, IsBitIdentical) {
  std::mt19937_64 rng(3);
  Parameter<double> w("w", random_tensor({4, 3}, rng));
  Graph<double> g;
  auto x = g.constant(random_tensor({5, 4}, rng));
  auto y = softmax(gelu(matmul(x, g.parameter(w))), -1);
  const auto first = y.value();
  g.replay();
  EXPECT_EQ(first, y.value());
}

TEST(Softmax, RowsSumToOneAndLargeInputsStayFinite) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>(Shape{2, 3}, {1000, 1001, 1002, -5, 0, 5}));
  const auto s = softmax(x, -1).value();
  for (std::size_t r = 0; r < 2; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_TRUE(std::isfinite(s.at(r, c)));
      acc += s.at(r, c);
    }
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
  EXPECT_THROW(softmax(x, 2), ShapeError);
}

TEST(Huber, PiecewiseValues) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>(Shape{1, 3}, {0.5, -2.0, 1.0}));
  const auto h = huber(x, 1.0).value();
  EXPECT_DOUBLE_EQ(h[0], 0.125);
  EXPECT_DOUBLE_EQ(h[1], 1.5);
  EXPECT_DOUBLE_EQ(h[2], 0.5);
  EXPECT_THROW(huber(x, 0.0), ConfigError);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(11);
  Graph<double> g;
  auto x = g.constant(random_tensor({3, 8}, rng, -4, 4));
  auto y = layer_norm(x, g.constant(Tensor<double>(Shape{8}, 1.0)), g.constant(Tensor<double>(Shape{8}, 0.0)))
               .value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

// Every primitive against central differences. A fixed random projection turns
// each output into a scalar so that all output components contribute.
class PrimitiveGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};

  Var<double> project(Graph<double>& g, Var<double> y) {
    std::mt19937_64 local(99);
    return sum(mul(y, g.constant(random_tensor(y.shape(), local))));
  }

  void check(Shape shape, const std::function<Var<double>(Graph<double>&, Var<double>)>& f, double lo = -1,
             double hi = 1) {
    auto x = random_tensor(shape, rng, lo, hi);
    const double err = grad_check([&](Graph<double>& g, Var<double> v) { return project(g, f(g, v)); }, x);
    EXPECT_LT(err, kGradTol);
  }
};

TEST_F(PrimitiveGradient, MatMulBothSides) {
  auto b = random_tensor({4, 3}, rng);
  check({2, 4}, [&](Graph<double>& g, Var<double> x) { return matmul(x, g.constant(b)); });
  auto a = random_tensor({5, 2}, rng);
  check({2, 4}, [&](Graph<double>& g, Var<double> x) { return matmul(g.constant(a), x); });
  check({3, 3}, [&](Graph<double>&, Var<double> x) { return matmul(x, x); });
}

TEST_F(PrimitiveGradient, Elementwise) {
  auto c = random_tensor({3, 4}, rng);
  check({3, 4}, [&](Graph<double>& g, Var<double> x) { return add(x, g.constant(c)); });
  check({3, 4}, [&](Graph<double>& g, Var<double> x) { return sub(g.constant(c), x); });
  check({3, 4}, [&](Graph<double>& g, Var<double> x) { return mul(x, g.constant(c)); });
  check({3, 4}, [&](Graph<double>&, Var<double> x) { return mul(x, x); });
  check({1}, [&](Graph<double>& g, Var<double> x) { return mul(g.constant(c), x); });
  check({3, 4}, [&](Graph<double>&, Var<double> x) { return scale(x, -2.5); });
  check({3, 4}, [&](Graph<double>&, Var<double> x) { return transpose(x); });
}

TEST_F(PrimitiveGradient, Activations) {
  // Keep relu inputs away from the kink.
  auto x = random_tensor({3, 4}, rng);
  for (auto& v : x.data()) v = v < 0 ? v - 0.1 : v + 0.1;
  EXPECT_LT(grad_check([&](Graph<double>& g, Var<double> v) { return project(g, relu(v)); }, x), kGradTol);
  check({3, 4}, [&](Graph<double>&, Var<double> v) { return gelu(v); }, -3, 3);
  check({3, 5}, [&](Graph<double>&, Var<double> v) { return softmax(v, -1); }, -2, 2);
  check({3, 5}, [&](Graph<double>&, Var<double> v) { return softmax(v, 0); }, -2, 2);
  check({2, 3, 4}, [&](Graph<double>&, Var<double> v) { return softmax(v, 1); }, -2, 2);
}

TEST_F(PrimitiveGradient, Reductions) {
  check({3, 4}, [&](Graph<double>&, Var<double> x) { return sum(x); });
  check({3, 4}, [&](Graph<double>&, Var<double> x) { return mean(x); });
}

TEST_F(PrimitiveGradient, HuberBothBranches) {
  auto x = random_tensor({4, 4}, rng, -3, 3);
  for (auto& v : x.data())
    if (std::abs(std::abs(v) - 1.0) < 0.05) v += 0.2;
  EXPECT_LT(grad_check([&](Graph<double>& g, Var<double> v) { return project(g, huber(v, 1.0)); }, x), kGradTol);
}

TEST_F(PrimitiveGradient, LayerNormInputGainBias) {
  auto gain = random_tensor({6}, rng), bias = random_tensor({6}, rng);
  auto x = random_tensor({3, 6}, rng);
  check({3, 6}, [&](Graph<double>& g, Var<double> v) {
    return layer_norm(v, g.constant(gain), g.constant(bias));
  });
  check({6}, [&](Graph<double>& g, Var<double> v) { return layer_norm(g.constant(x), v, g.constant(bias)); });
  check({6}, [&](Graph<double>& g, Var<double> v) { return layer_norm(g.constant(x), g.constant(gain), v); });
}

TEST_F(PrimitiveGradient, Structural) {
  auto other = random_tensor({3, 2}, rng);
  check({3, 4}, [&](Graph<double>& g, Var<double> x) { return concat_last<double>({x, g.constant(other)}); });
  auto rows = random_tensor({2, 4}, rng);
  check({3, 4}, [&](Graph<double>& g, Var<double> x) { return concat_rows<double>({g.constant(rows), x}); });
  check({5, 4}, [&](Graph<double>&, Var<double> x) { return slice_rows(x, 1, 3); });
  check({5, 4}, [&](Graph<double>&, Var<double> x) { return slice_token(x, 0); });
  check({1, 4}, [&](Graph<double>&, Var<double> x) { return broadcast_rows(x, 3); });
  check({2, 6}, [&](Graph<double>&, Var<double> x) { return reshape(x, Shape{3, 4}); });
  auto w = random_tensor({4, 3}, rng);
  check({1, 3}, [&](Graph<double>& g, Var<double> b) { return affine(g.constant(rows), g.constant(w), b); });
}

TEST(NeedsGrad, ConstantSubgraphsCarryNoGradient) {
  Graph<double> g;
  Parameter<double> p("p", Tensor<double>(Shape{1, 2}, 1.0));
  auto c = scale(g.constant(Tensor<double>(Shape{1, 2}, 3.0)), 2.0);
  auto loss = sum(mul(c, g.parameter(p)));
  g.backward(loss);
  EXPECT_TRUE(g.grad(c).empty());
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
}
