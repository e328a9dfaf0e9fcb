#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Graph is an append-only tape. Each node records its op, its inputs, and the
// activations its backward rule needs. Inputs always precede consumers, so a
// single reverse sweep computes gradients and a forward sweep replays values.
// Only the primitives the attention networks need are provided; broadcasting is
// limited to exact shapes and size-1 scalars.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "da6/errors.hpp"
#include "da6/tensor.hpp"

namespace da6::ad {

// Trainable leaf. `grad` is accumulated by Graph::backward and cleared by zero_grad().
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  mutable Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() const { grad.fill(T(0)); }
};

enum class OpKind : std::uint8_t {
  Constant,
  Parameter,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Relu,
  Gelu,
  Scale,
  Sum,
  Mean,
  Softmax,
  LayerNorm,
  ConcatLast,
  ConcatRows,
  SliceRows,
  BroadcastRows,
  Reshape,
  Huber,
};

template <typename T>
class Graph;

// Handle to a node of a graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Graph {
 public:
  struct Node {
    OpKind op = OpKind::Constant;
    std::vector<std::uint32_t> inputs;
    double attr = 0.0;         // scale factor, epsilon, kappa
    std::size_t index = 0;     // axis, row start, repeat count
    std::size_t extent = 0;    // row count for slices
    Shape target_shape;        // reshape
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> saved;           // normalized activations for layer_norm
    Tensor<T> saved_aux;       // inverse std for layer_norm
    const Parameter<T>* param = nullptr;
    bool needs_grad = false;   // true when a parameter is upstream
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    Node node;
    node.op = OpKind::Constant;
    node.value = std::move(value);
    return push(std::move(node));
  }

  Var<T> parameter(const Parameter<T>& p) {
    Node node;
    node.op = OpKind::Parameter;
    node.param = &p;
    node.value = p.value;
    node.needs_grad = true;
    return push(std::move(node));
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }

  // Gradient of the last backward() wrt an interior node; zero-shaped when unreached.
  const Tensor<T>& grad(Var<T> v) const { return nodes_.at(v.id).grad; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  void clear() { nodes_.clear(); }

  // Appends a node and evaluates it. Used by the op free functions.
  Var<T> emit(Node node) {
    auto v = push(std::move(node));
    evaluate(nodes_.back());
    return v;
  }

  // Recomputes every non-constant node from its inputs, re-reading parameter values.
  void replay() {
    for (auto& node : nodes_) {
      if (node.op == OpKind::Constant) continue;
      if (node.op == OpKind::Parameter) {
        node.value = node.param->value;
        continue;
      }
      evaluate(node);
    }
  }

  // Reverse sweep from a scalar loss. Parameter gradients accumulate across calls.
  void backward(Var<T> loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    if (value(loss).size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_string(value(loss).shape()));
    }
    for (auto& node : nodes_) node.grad = Tensor<T>();
    nodes_[loss.id].grad = Tensor<T>(nodes_[loss.id].value.shape(), T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.grad.empty() || !node.needs_grad) continue;
      propagate(node);
      if (node.op == OpKind::Parameter) {
        auto& g = node.param->grad;
        if (g.shape() != node.value.shape()) g = Tensor<T>(node.value.shape());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += node.grad[k];
      }
    }
  }

 private:
  Var<T> push(Node node) {
    for (auto in : node.inputs) {
      if (in >= nodes_.size()) throw ContractError("graph input refers to a later node");
      node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
    }
    nodes_.push_back(std::move(node));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& in(const Node& node, std::size_t k) const { return nodes_[node.inputs[k]].value; }

  Tensor<T>& grad_of(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  // Outer/axis/inner extents for an axis reduction.
  static void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                         std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  }

  static constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kGeluA = T(0.044715);

  void evaluate(Node& node) {
    switch (node.op) {
      case OpKind::Constant:
      case OpKind::Parameter:
        return;
      case OpKind::MatMul: {
        const auto& a = in(node, 0);
        const auto& b = in(node, 1);
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        Tensor<T> c(Shape{m, n});
        const T* ap = a.data().data();
        const T* bp = b.data().data();
        T* cp = c.data().data();
        for (std::size_t i = 0; i < m; ++i) {
          T* crow = cp + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T av = ap[i * k + p];
            const T* brow = bp + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
          }
        }
        node.value = std::move(c);
        return;
      }
      case OpKind::Transpose: {
        const auto& a = in(node, 0);
        const std::size_t r = a.dim(0), c = a.dim(1);
        Tensor<T> out(Shape{c, r});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
        node.value = std::move(out);
        return;
      }
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& a = in(node, 0);
        const auto& b = in(node, 1);
        const auto& big = a.size() >= b.size() ? a : b;
        Tensor<T> out(big.shape());
        const bool sa = a.size() == 1, sb = b.size() == 1;
        for (std::size_t i = 0; i < out.size(); ++i) {
          const T x = sa ? a[0] : a[i];
          const T y = sb ? b[0] : b[i];
          out[i] = node.op == OpKind::Add ? x + y : node.op == OpKind::Sub ? x - y : x * y;
        }
        node.value = std::move(out);
        return;
      }
      case OpKind::Relu: {
        const auto& a = in(node, 0);
        Tensor<T> out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
        node.value = std::move(out);
        return;
      }
      case OpKind::Gelu: {
        const auto& a = in(node, 0);
        Tensor<T> out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const T x = a[i];
          out[i] = T(0.5) * x * (T(1) + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
        }
        node.value = std::move(out);
        return;
      }
      case OpKind::Scale: {
        const auto& a = in(node, 0);
        Tensor<T> out(a.shape());
        const T s = static_cast<T>(node.attr);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
        node.value = std::move(out);
        return;
      }
      case OpKind::Sum:
      case OpKind::Mean: {
        const auto& a = in(node, 0);
        T acc = T(0);
        for (auto v : a.data()) acc += v;
        if (node.op == OpKind::Mean) acc /= static_cast<T>(a.size());
        node.value = Tensor<T>::scalar(acc);
        return;
      }
      case OpKind::Softmax: {
        const auto& a = in(node, 0);
        std::size_t outer, len, inner;
        split_axis(a.shape(), node.index, outer, len, inner);
        Tensor<T> out(a.shape());
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t r = 0; r < inner; ++r) {
            const std::size_t base = o * len * inner + r;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, a[base + k * inner]);
            T total = T(0);
            for (std::size_t k = 0; k < len; ++k) {
              const T e = std::exp(a[base + k * inner] - mx);
              out[base + k * inner] = e;
              total += e;
            }
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
          }
        }
        node.value = std::move(out);
        return;
      }
      case OpKind::LayerNorm: {
        const auto& x = in(node, 0);
        const auto& gain = in(node, 1);
        const auto& bias = in(node, 2);
        const std::size_t c = x.cols(), rows = x.rows();
        Tensor<T> out(x.shape()), xhat(x.shape()), rstd(Shape{rows});
        const T eps = static_cast<T>(node.attr);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* row = x.data().data() + r * c;
          T mean = T(0);
          for (std::size_t j = 0; j < c; ++j) mean += row[j];
          mean /= static_cast<T>(c);
          T var = T(0);
          for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
          var /= static_cast<T>(c);
          const T is = T(1) / std::sqrt(var + eps);
          rstd[r] = is;
          for (std::size_t j = 0; j < c; ++j) {
            const T h = (row[j] - mean) * is;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain[j] + bias[j];
          }
        }
        node.value = std::move(out);
        node.saved = std::move(xhat);
        node.saved_aux = std::move(rstd);
        return;
      }
      case OpKind::ConcatLast: {
        const auto& first = in(node, 0);
        const std::size_t rows = first.rows();
        std::size_t total = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) total += in(node, k).cols();
        Shape shape = first.shape();
        shape.back() = total;
        Tensor<T> out(shape);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          const auto& t = in(node, k);
          const std::size_t c = t.cols();
          for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(t.data().data() + r * c, c, out.data().data() + r * total + offset);
          offset += c;
        }
        node.value = std::move(out);
        return;
      }
      case OpKind::ConcatRows: {
        const std::size_t c = in(node, 0).cols();
        std::size_t rows = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) rows += in(node, k).rows();
        Tensor<T> out(Shape{rows, c});
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          const auto& t = in(node, k);
          std::copy(t.data().begin(), t.data().end(), out.data().begin() + offset);
          offset += t.size();
        }
        node.value = std::move(out);
        return;
      }
      case OpKind::SliceRows: {
        const auto& a = in(node, 0);
        const std::size_t c = a.cols();
        Tensor<T> out(Shape{node.extent, c});
        std::copy_n(a.data().data() + node.index * c, node.extent * c, out.data().data());
        node.value = std::move(out);
        return;
      }
      case OpKind::BroadcastRows: {
        const auto& a = in(node, 0);
        const std::size_t c = a.size();
        Tensor<T> out(Shape{node.index, c});
        for (std::size_t r = 0; r < node.index; ++r)
          std::copy_n(a.data().data(), c, out.data().data() + r * c);
        node.value = std::move(out);
        return;
      }
      case OpKind::Reshape: {
        node.value = Tensor<T>(node.target_shape, in(node, 0).storage());
        return;
      }
      case OpKind::Huber: {
        const auto& a = in(node, 0);
        const T kappa = static_cast<T>(node.attr);
        Tensor<T> out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const T ax = std::abs(a[i]);
          out[i] = ax <= kappa ? T(0.5) * a[i] * a[i] : kappa * (ax - T(0.5) * kappa);
        }
        node.value = std::move(out);
        return;
      }
    }
  }

  void propagate(Node& node) {
    const auto& g = node.grad;
    switch (node.op) {
      case OpKind::Constant:
      case OpKind::Parameter:
        return;
      case OpKind::MatMul: {
        const auto& a = in(node, 0);
        const auto& b = in(node, 1);
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        // dA = dC * B^T
        if (nodes_[node.inputs[0]].needs_grad) {
          auto& ga = grad_of(node.inputs[0]);
          for (std::size_t i = 0; i < m; ++i) {
            const T* grow = g.data().data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const T* brow = b.data().data() + p * n;
              T acc = T(0);
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        }
        // dB = A^T * dC
        if (nodes_[node.inputs[1]].needs_grad) {
          auto& gb = grad_of(node.inputs[1]);
          for (std::size_t i = 0; i < m; ++i) {
            const T* grow = g.data().data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const T av = a[i * k + p];
              T* gbrow = gb.data().data() + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
        return;
      }
      case OpKind::Transpose: {
        auto& ga = grad_of(node.inputs[0]);
        const std::size_t r = ga.dim(0), c = ga.dim(1);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
        return;
      }
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& a = in(node, 0);
        const auto& b = in(node, 1);
        const bool sa = a.size() == 1 && g.size() > 1;
        const bool sb = b.size() == 1 && g.size() > 1;
        if (nodes_[node.inputs[0]].needs_grad) {
          auto& ga = grad_of(node.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            T d = g[i];
            if (node.op == OpKind::Mul) d *= sb ? b[0] : b[i];
            ga[sa ? 0 : i] += d;
          }
        }
        if (nodes_[node.inputs[1]].needs_grad) {
          auto& gb = grad_of(node.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            T d = node.op == OpKind::Sub ? -g[i] : g[i];
            if (node.op == OpKind::Mul) d *= sa ? a[0] : a[i];
            gb[sb ? 0 : i] += d;
          }
        }
        return;
      }
      case OpKind::Relu: {
        const auto& a = in(node, 0);
        auto& ga = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[i] > T(0)) ga[i] += g[i];
        return;
      }
      case OpKind::Gelu: {
        const auto& a = in(node, 0);
        auto& ga = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = a[i];
          const T t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
          const T dt = (T(1) - t * t) * kGeluC * (T(1) + T(3) * kGeluA * x * x);
          ga[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
        }
        return;
      }
      case OpKind::Scale: {
        auto& ga = grad_of(node.inputs[0]);
        const T s = static_cast<T>(node.attr);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        return;
      }
      case OpKind::Sum:
      case OpKind::Mean: {
        auto& ga = grad_of(node.inputs[0]);
        T d = g[0];
        if (node.op == OpKind::Mean) d /= static_cast<T>(ga.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d;
        return;
      }
      case OpKind::Softmax: {
        const auto& y = node.value;
        auto& ga = grad_of(node.inputs[0]);
        std::size_t outer, len, inner;
        split_axis(y.shape(), node.index, outer, len, inner);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t r = 0; r < inner; ++r) {
            const std::size_t base = o * len * inner + r;
            T dot = T(0);
            for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const std::size_t idx = base + k * inner;
              ga[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
        return;
      }
      case OpKind::LayerNorm: {
        const auto& gain = in(node, 1);
        const auto& xhat = node.saved;
        const auto& rstd = node.saved_aux;
        const std::size_t c = xhat.cols(), rows = xhat.rows();
        auto& gx = grad_of(node.inputs[0]);
        auto& gg = grad_of(node.inputs[1]);
        auto& gbias = grad_of(node.inputs[2]);
        std::vector<T> dxhat(c);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            const T gy = g[r * c + j];
            gg[j] += gy * xhat[r * c + j];
            gbias[j] += gy;
            dxhat[j] = gy * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[r * c + j];
          }
          mean_d /= static_cast<T>(c);
          mean_dx /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j)
            gx[r * c + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * c + j] * mean_dx);
        }
        return;
      }
      case OpKind::ConcatLast: {
        const std::size_t total = g.cols(), rows = g.rows();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          auto& gi = grad_of(node.inputs[k]);
          const std::size_t c = gi.cols();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gi[r * c + j] += g[r * total + offset + j];
          offset += c;
        }
        return;
      }
      case OpKind::ConcatRows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          auto& gi = grad_of(node.inputs[k]);
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[offset + i];
          offset += gi.size();
        }
        return;
      }
      case OpKind::SliceRows: {
        auto& ga = grad_of(node.inputs[0]);
        const std::size_t base = node.index * ga.cols();
        for (std::size_t i = 0; i < g.size(); ++i) ga[base + i] += g[i];
        return;
      }
      case OpKind::BroadcastRows: {
        auto& ga = grad_of(node.inputs[0]);
        const std::size_t c = ga.size();
        for (std::size_t r = 0; r < node.index; ++r)
          for (std::size_t j = 0; j < c; ++j) ga[j] += g[r * c + j];
        return;
      }
      case OpKind::Reshape: {
        auto& ga = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        return;
      }
      case OpKind::Huber: {
        const auto& a = in(node, 0);
        const T kappa = static_cast<T>(node.attr);
        auto& ga = grad_of(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = a[i];
          const T d = std::abs(x) <= kappa ? x : (x > T(0) ? kappa : -kappa);
          ga[i] += g[i] * d;
        }
        return;
      }
    }
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
Graph<T>& same_graph(Var<T> a, Var<T> b) {
  if (a.graph == nullptr || a.graph != b.graph) throw ContractError("operands belong to different graphs");
  return *a.graph;
}

template <typename T>
typename Graph<T>::Node make_node(OpKind op, std::initializer_list<Var<T>> inputs) {
  typename Graph<T>::Node node;
  node.op = op;
  for (auto v : inputs) node.inputs.push_back(v.id);
  return node;
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  return g.emit(detail::make_node<T>(OpKind::MatMul, {a, b}));
}

template <typename T>
Var<T> transpose(Var<T> a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_string(a.shape()));
  return a.graph->emit(detail::make_node<T>(OpKind::Transpose, {a}));
}

namespace detail {
template <typename T>
Var<T> binary(OpKind op, const char* name, Var<T> a, Var<T> b) {
  auto& g = same_graph(a, b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa != sb && shape_size(sa) != 1 && shape_size(sb) != 1) {
    throw ShapeError(std::string(name) + ": incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  return g.emit(make_node<T>(op, {a, b}));
}
}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return detail::binary(OpKind::Add, "add", a, b);
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary(OpKind::Sub, "sub", a, b);
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return detail::binary(OpKind::Mul, "mul", a, b);
}

template <typename T>
Var<T> relu(Var<T> a) {
  return a.graph->emit(detail::make_node<T>(OpKind::Relu, {a}));
}

// Tanh approximation of GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  return a.graph->emit(detail::make_node<T>(OpKind::Gelu, {a}));
}

template <typename T>
Var<T> scale(Var<T> a, double factor) {
  auto node = detail::make_node<T>(OpKind::Scale, {a});
  node.attr = factor;
  return a.graph->emit(std::move(node));
}

template <typename T>
Var<T> sum(Var<T> a) {
  return a.graph->emit(detail::make_node<T>(OpKind::Sum, {a}));
}

template <typename T>
Var<T> mean(Var<T> a) {
  return a.graph->emit(detail::make_node<T>(OpKind::Mean, {a}));
}

// Max-shifted softmax along `axis`; negative axes count from the end.
template <typename T>
Var<T> softmax(Var<T> a, int axis = -1) {
  const auto rank = static_cast<int>(a.shape().size());
  const int resolved = axis < 0 ? rank + axis : axis;
  if (resolved < 0 || resolved >= rank) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_string(a.shape()));
  }
  auto node = detail::make_node<T>(OpKind::Softmax, {a});
  node.index = static_cast<std::size_t>(resolved);
  return a.graph->emit(std::move(node));
}

// Normalizes over the last axis, then applies gain and bias (both of length C).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, double eps = 1e-5) {
  const std::size_t c = x.shape().back();
  if (gain.value().size() != c || bias.value().size() != c) {
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                     " do not match last dimension of " + shape_string(x.shape()));
  }
  detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  auto node = detail::make_node<T>(OpKind::LayerNorm, {x, gain, bias});
  node.attr = eps;
  return x.graph->emit(std::move(node));
}

// Concatenates along the last axis; leading dimensions must agree.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  typename Graph<T>::Node node;
  node.op = OpKind::ConcatLast;
  Shape lead = parts[0].shape();
  lead.pop_back();
  for (auto p : parts) {
    detail::same_graph(parts[0], p);
    Shape s = p.shape();
    s.pop_back();
    if (s != lead) {
      throw ShapeError("concat_last: leading shape mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    node.inputs.push_back(p.id);
  }
  return parts[0].graph->emit(std::move(node));
}

// Stacks rank-2 (or rank-1 single-row) inputs along the first axis.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  typename Graph<T>::Node node;
  node.op = OpKind::ConcatRows;
  const std::size_t c = parts[0].value().cols();
  for (auto p : parts) {
    detail::same_graph(parts[0], p);
    if (p.shape().size() > 2 || p.value().cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    node.inputs.push_back(p.id);
  }
  return parts[0].graph->emit(std::move(node));
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  const auto& v = a.value();
  if (count == 0 || start + count > v.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(a.shape()));
  }
  auto node = detail::make_node<T>(OpKind::SliceRows, {a});
  node.index = start;
  node.extent = count;
  return a.graph->emit(std::move(node));
}

// Token `row` of a token matrix, as a 1xC row.
template <typename T>
Var<T> slice_token(Var<T> a, std::size_t row) {
  return slice_rows(a, row, 1);
}

// Repeats a single row (1xC or C) `n` times into an n x C matrix.
template <typename T>
Var<T> broadcast_rows(Var<T> a, std::size_t n) {
  if (n == 0) throw ShapeError("broadcast_rows: zero repeats");
  if (a.value().rows() != 1) throw ShapeError("broadcast_rows: expected a single row, got " + shape_string(a.shape()));
  auto node = detail::make_node<T>(OpKind::BroadcastRows, {a});
  node.index = n;
  return a.graph->emit(std::move(node));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  auto node = detail::make_node<T>(OpKind::Reshape, {a});
  node.target_shape = std::move(shape);
  return a.graph->emit(std::move(node));
}

// Elementwise Huber: x^2/2 for |x| <= kappa, kappa(|x| - kappa/2) beyond.
template <typename T>
Var<T> huber(Var<T> a, double kappa) {
  if (!(kappa > 0.0)) throw ConfigError("huber: kappa must be positive");
  auto node = detail::make_node<T>(OpKind::Huber, {a});
  node.attr = kappa;
  return a.graph->emit(std::move(node));
}

// x W + b, with b broadcast over the rows of x.
template <typename T>
Var<T> affine(Var<T> x, Var<T> weight, Var<T> bias) {
  auto y = matmul(x, weight);
  const std::size_t rows = y.value().rows();
  return add(y, rows == 1 ? reshape(bias, y.shape()) : broadcast_rows(bias, rows));
}

// Maximum over components of |analytic - numeric| / max(1, |analytic|, |numeric|),
// with the numeric derivative from central differences.
inline double relative_gradient_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

using ScalarBuilder = std::function<Var<double>(Graph<double>&, Var<double>)>;

// Checks the gradient of f at x against central finite differences.
inline double grad_check(const ScalarBuilder& f, const Tensor<double>& x, double eps = 1e-5) {
  Parameter<double> leaf("x", x);
  Graph<double> g;
  auto loss = f(g, g.parameter(leaf));
  g.backward(loss);
  const Tensor<double> analytic = leaf.grad;

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor<double> xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    Graph<double> gp, gm;
    const double fp = f(gp, gp.constant(xp)).value().item();
    const double fm = f(gm, gm.constant(xm)).value().item();
    worst = std::max(worst, relative_gradient_error(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

// Same check over every component of a parameter set. `stride` > 1 samples every
// stride-th component of each parameter to bound runtime on larger models.
inline double grad_check_parameters(const std::function<Var<double>(Graph<double>&)>& f,
                                    std::span<Parameter<double>* const> params, double eps = 1e-5,
                                    std::size_t stride = 1) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    g.backward(f(g));
  }
  double worst = 0.0;
  for (auto* p : params) {
    const Tensor<double> analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); i += std::max<std::size_t>(stride, 1)) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      Graph<double> gp;
      const double fp = f(gp).value().item();
      p->value[i] = saved - eps;
      Graph<double> gm;
      const double fm = f(gm).value().item();
      p->value[i] = saved;
      worst = std::max(worst, relative_gradient_error(analytic[i], (fp - fm) / (2.0 * eps)));
    }
  }
  return worst;
}

}  // namespace da6::ad
