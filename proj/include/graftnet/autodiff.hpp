#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "graftnet/errors.hpp"

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Value is a shared handle to a Node. Operations record their parents and a
// backward closure; backward() walks the recorded graph in reverse
// topological order. Everything is templated on the scalar so the same model
// code runs in float for training and in double for gradient checks.
//
// Shapes are rank 1 ([n]) or rank 2 ([rows, cols]). Row-indexed operations
// (gather_rows, segment_sum, scale_rows) treat a rank-1 value as a column of
// scalars.

namespace graftnet::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <std::floating_point T>
class Value {
 public:
  using scalar_type = T;

  Value() = default;
  explicit Value(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Value constant(Shape shape, std::vector<T> data) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("value data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Value(std::move(node));
  }

  static Value zeros(Shape shape) {
    const auto n = shape_size(shape);
    return constant(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Value scalar(T x) { return constant({1}, {x}); }

  // Leaf that collects gradients.
  static Value parameter(Shape shape, std::vector<T> data) {
    Value v = constant(std::move(shape), std::move(data));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t row_width() const { return rank() == 1 ? 1 : size() / rows(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  // Empty until a backward pass reaches this value.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }

  T item() const {
    if (size() != 1) throw ContractViolation("item() on non-scalar " + shape_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }

  bool has_fault() const {
    auto bad = [](T x) { return !std::isfinite(x); };
    return std::any_of(node_->data.begin(), node_->data.end(), bad) ||
           std::any_of(node_->grad.begin(), node_->grad.end(), bad);
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
Value<T> make_result(Shape shape, std::vector<T> data, std::vector<Value<T>> inputs,
                     std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Value<T>& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backward_fn = std::move(backward);
    }
  }
  return Value<T>(std::move(node));
}

// Parent gradient buffer, or nullptr when the parent does not need one.
template <class T>
T* grad_of(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad ? node->ensure_grad().data() : nullptr;
}

// Eight independent accumulators so the compiler can vectorize without
// reassociating a single running sum.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) s[k] += a[i + k] * b[i + k];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) + tail;
}

template <class T>
inline void axpy(T* y, const T* x, T alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
inline T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
void require_same_shape(const Value<T>& a, const Value<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

template <class T, class F, class D>
Value<T> unary(const Value<T>& x, F&& f, D&& dfdy_dfdx) {
  std::vector<T> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, dfdy_dfdx](Node<T>& self) {
    T* gx = grad_of(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      gx[i] += self.grad[i] * dfdy_dfdx(xn->data[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense algebra

/// weight[k,m] applied to each row of input ([m] or [rows,m]), plus bias[k].
template <class T>
Value<T> linear(const Value<T>& input, const Value<T>& weight, const Value<T>& bias = {}) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be rank 2");
  const std::size_t k = weight.shape()[0];
  const std::size_t m = weight.shape()[1];
  const bool vector_in = input.rank() == 1;
  const std::size_t in_width = vector_in ? input.size() : input.shape()[1];
  if (in_width != m || input.rank() > 2) {
    throw DimensionError("linear: input " + shape_string(input.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.size() != k)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t rows = vector_in ? 1 : input.shape()[0];
  std::vector<T> out(rows * k);
  const T* x = input.data().data();
  const T* w = weight.data().data();
  const T* b = has_bias ? bias.data().data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      out[r * k + i] = detail::dot(w + i * m, x + r * m, m) + (b ? b[i] : T(0));
    }
  }
  Shape shape = vector_in ? Shape{k} : Shape{rows, k};
  std::vector<Value<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  auto xn = input.node();
  auto wn = weight.node();
  auto bn = has_bias ? bias.node() : nullptr;
  return detail::make_result<T>(
      std::move(shape), std::move(out), std::move(inputs), [=](Node<T>& self) {
        const T* gy = self.grad.data();
        T* gx = detail::grad_of(xn);
        T* gw = detail::grad_of(wn);
        T* gb = bn ? detail::grad_of(bn) : nullptr;
        const T* xd = xn->data.data();
        const T* wd = wn->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < k; ++i) {
            const T g = gy[r * k + i];
            if (g == T(0)) continue;
            if (gx) detail::axpy(gx + r * m, wd + i * m, g, m);
            if (gw) detail::axpy(gw + i * m, xd + r * m, g, m);
            if (gb) gb[i] += g;
          }
        }
      });
}

/// Concatenation along the last axis. All parts share rank and row count.
template <class T>
Value<T> concat(const std::vector<Value<T>>& parts) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  const std::size_t rows = rank == 1 ? 1 : parts[0].shape()[0];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != rank || (rank == 2 && p.shape()[0] != rows)) {
      throw DimensionError("concat: incompatible part " + shape_string(p.shape()));
    }
    widths.push_back(rank == 1 ? p.size() : p.shape()[1]);
  }
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const T* src = parts[j].data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(src + r * widths[j], widths[j], out.data() + r * total + offset);
    }
    offset += widths[j];
  }
  Shape shape = rank == 1 ? Shape{total} : Shape{rows, total};
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>(std::move(shape), std::move(out), parts,
                                [nodes, widths, rows, total](Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (std::size_t j = 0; j < nodes.size(); ++j) {
                                    if (T* g = detail::grad_of(nodes[j])) {
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        detail::axpy(g + r * widths[j],
                                                     self.grad.data() + r * total + offset, T(1),
                                                     widths[j]);
                                      }
                                    }
                                    offset += widths[j];
                                  }
                                });
}

/// Same data, different shape.
template <class T>
Value<T> reshape(const Value<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()),
                                {x}, [xn](Node<T>& self) {
                                  if (T* g = detail::grad_of(xn)) {
                                    detail::axpy(g, self.grad.data(), T(1), self.grad.size());
                                  }
                                });
}

template <class T>
Value<T> sum(const Value<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto xn = x.node();
  return detail::make_result<T>({1}, {total}, {x}, [xn](Node<T>& self) {
    if (T* g = detail::grad_of(xn)) {
      for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += self.grad[0];
    }
  });
}

template <class T>
Value<T> mean(const Value<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <class T>
Value<T> dot(const Value<T>& a, const Value<T>& b) {
  detail::require_same_shape(a, b, "dot");
  const T d = detail::dot(a.data().data(), b.data().data(), a.size());
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>({1}, {d}, {a, b}, [an, bn](Node<T>& self) {
    const T g = self.grad[0];
    if (T* ga = detail::grad_of(an)) detail::axpy(ga, bn->data.data(), g, an->data.size());
    if (T* gb = detail::grad_of(bn)) detail::axpy(gb, an->data.data(), g, bn->data.size());
  });
}

template <class T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (T* ga = detail::grad_of(an)) detail::axpy(ga, self.grad.data(), T(1), self.grad.size());
    if (T* gb = detail::grad_of(bn)) detail::axpy(gb, self.grad.data(), T(1), self.grad.size());
  });
}

/// Elementwise product.
template <class T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    T* ga = detail::grad_of(an);
    T* gb = detail::grad_of(bn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (ga) ga[i] += self.grad[i] * bn->data[i];
      if (gb) gb[i] += self.grad[i] * an->data[i];
    }
  });
}

/// Multiplication by a constant.
template <class T>
Value<T> scale(const Value<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn, factor](Node<T>& self) {
    if (T* g = detail::grad_of(xn)) detail::axpy(g, self.grad.data(), factor, self.grad.size());
  });
}

/// Row r of x multiplied by factors[r]; factors is rank 1 with one entry per row.
template <class T>
Value<T> scale_rows(const Value<T>& x, const Value<T>& factors) {
  const std::size_t rows = x.rows();
  const std::size_t width = x.row_width();
  if (factors.rank() != 1 || factors.size() != rows) {
    throw DimensionError("scale_rows: factors " + shape_string(factors.shape()) + " for " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = factors[r] * x[r * width + c];
  }
  auto xn = x.node();
  auto fn = factors.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, factors}, [xn, fn, rows, width](Node<T>& self) {
        T* gx = detail::grad_of(xn);
        T* gf = detail::grad_of(fn);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gy = self.grad.data() + r * width;
          if (gx) detail::axpy(gx + r * width, gy, fn->data[r], width);
          if (gf) gf[r] += detail::dot(gy, xn->data.data() + r * width, width);
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise activations

template <class T>
Value<T> relu(const Value<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <class T>
Value<T> tanh(const Value<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T out) { return T(1) - out * out; });
}

template <class T>
Value<T> sigmoid(const Value<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::sigmoid(v); }, [](T, T out) { return out * (T(1) - out); });
}

// ---------------------------------------------------------------------------
// Index plumbing

/// Rows of x selected by index (repeats allowed).
template <class T>
Value<T> gather_rows(const Value<T>& x, std::vector<std::size_t> index) {
  if (index.empty()) throw ContractViolation("gather_rows: empty index");
  const std::size_t rows = x.rows();
  const std::size_t width = x.row_width();
  std::vector<T> out(index.size() * width);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " of " +
                           std::to_string(rows));
    }
    std::copy_n(x.data().data() + index[i] * width, width, out.data() + i * width);
  }
  Shape shape = x.rank() == 1 ? Shape{index.size()} : Shape{index.size(), width};
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {x},
                                [xn, index = std::move(index), width](Node<T>& self) {
                                  T* g = detail::grad_of(xn);
                                  if (!g) return;
                                  for (std::size_t i = 0; i < index.size(); ++i) {
                                    detail::axpy(g + index[i] * width,
                                                 self.grad.data() + i * width, T(1), width);
                                  }
                                });
}

/// out[segment[i]] += weight[i] * x[i]. Segments that receive nothing stay zero.
/// An empty weight list means all weights are 1.
template <class T>
Value<T> segment_sum(const Value<T>& x, std::vector<std::size_t> segment, std::size_t segments,
                     std::vector<T> weight = {}) {
  const std::size_t rows = x.rows();
  const std::size_t width = x.row_width();
  if (segment.size() != rows) {
    throw DimensionError("segment_sum: " + std::to_string(segment.size()) + " segment ids for " +
                         std::to_string(rows) + " rows");
  }
  if (!weight.empty() && weight.size() != rows) {
    throw DimensionError("segment_sum: weight length mismatch");
  }
  if (segments == 0) throw DimensionError("segment_sum: zero segments");
  std::vector<T> out(segments * width, T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    if (segment[i] >= segments) throw DimensionError("segment_sum: segment id out of range");
    const T w = weight.empty() ? T(1) : weight[i];
    detail::axpy(out.data() + segment[i] * width, x.data().data() + i * width, w, width);
  }
  Shape shape = x.rank() == 1 ? Shape{segments} : Shape{segments, width};
  auto xn = x.node();
  return detail::make_result<T>(
      std::move(shape), std::move(out), {x},
      [xn, segment = std::move(segment), weight = std::move(weight), width](Node<T>& self) {
        T* g = detail::grad_of(xn);
        if (!g) return;
        for (std::size_t i = 0; i < segment.size(); ++i) {
          const T w = weight.empty() ? T(1) : weight[i];
          detail::axpy(g + i * width, self.grad.data() + segment[i] * width, w, width);
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax within each group. group_of[i] names the group of scores[i]; every
/// group in [0, groups) must be nonempty.
template <class T>
Value<T> grouped_softmax(const Value<T>& scores, std::vector<std::size_t> group_of,
                         std::size_t groups) {
  if (scores.rank() != 1 || group_of.size() != scores.size()) {
    throw DimensionError("grouped_softmax: need one group id per score");
  }
  std::vector<T> peak(groups, -std::numeric_limits<T>::infinity());
  std::vector<std::size_t> members(groups, 0);
  for (std::size_t i = 0; i < group_of.size(); ++i) {
    if (group_of[i] >= groups) throw ContractViolation("grouped_softmax: group id out of range");
    peak[group_of[i]] = std::max(peak[group_of[i]], scores[i]);
    ++members[group_of[i]];
  }
  for (std::size_t g = 0; g < groups; ++g) {
    if (members[g] == 0) {
      throw ContractViolation("grouped_softmax: group " + std::to_string(g) + " is empty");
    }
  }
  std::vector<T> out(scores.size());
  std::vector<T> total(groups, T(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(scores[i] - peak[group_of[i]]);
    total[group_of[i]] += out[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= total[group_of[i]];
  auto sn = scores.node();
  return detail::make_result<T>(
      scores.shape(), std::move(out), {scores},
      [sn, group_of = std::move(group_of), groups](Node<T>& self) {
        T* g = detail::grad_of(sn);
        if (!g) return;
        std::vector<T> inner(groups, T(0));
        for (std::size_t i = 0; i < group_of.size(); ++i) {
          inner[group_of[i]] += self.data[i] * self.grad[i];
        }
        for (std::size_t i = 0; i < group_of.size(); ++i) {
          g[i] += self.data[i] * (self.grad[i] - inner[group_of[i]]);
        }
      });
}

// ---------------------------------------------------------------------------
// Recurrent encoder

/// Weights of one LSTM: gates stacked as [input, forget, candidate, output].
template <class T>
struct LstmWeights {
  Value<T> input_weight;      // [4n, m]
  Value<T> recurrent_weight;  // [4n, n]
  Value<T> bias;              // [4n]

  std::size_t hidden() const { return recurrent_weight.shape()[1]; }
};

/// Runs an LSTM independently over each segment [offsets[s], offsets[s+1]) of
/// the rows of x ([positions, m]) and returns every hidden state ([positions, n]).
/// Each segment starts from zero hidden and cell state.
template <class T>
Value<T> lstm_segments(const Value<T>& x, std::vector<std::size_t> offsets,
                       const LstmWeights<T>& weights) {
  const std::size_t n = weights.hidden();
  const std::size_t m = weights.input_weight.shape()[1];
  if (x.rank() != 2 || x.shape()[1] != m) {
    throw DimensionError("lstm: input " + shape_string(x.shape()) + " for input width " +
                         std::to_string(m));
  }
  if (weights.input_weight.shape() != Shape{4 * n, m} ||
      weights.recurrent_weight.shape() != Shape{4 * n, n} || weights.bias.shape() != Shape{4 * n}) {
    throw DimensionError("lstm: inconsistent weight shapes");
  }
  const std::size_t positions = x.shape()[0];
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != positions ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw ContractViolation("lstm: offsets must partition the input rows");
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s] == offsets[s + 1]) throw ContractViolation("lstm: empty sequence");
  }

  const T* xd = x.data().data();
  const T* wx = weights.input_weight.data().data();
  const T* wh = weights.recurrent_weight.data().data();
  const T* bd = weights.bias.data().data();
  // Saved per position: activated gates (4n), cell state (n), tanh(cell) (n).
  auto gates = std::make_shared<std::vector<T>>(positions * 4 * n);
  auto cells = std::make_shared<std::vector<T>>(positions * n);
  auto cell_tanh = std::make_shared<std::vector<T>>(positions * n);
  std::vector<T> out(positions * n);
  std::vector<T> zero(n, T(0));

  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (std::size_t t = offsets[s]; t < offsets[s + 1]; ++t) {
      const bool first = t == offsets[s];
      const T* h_prev = first ? zero.data() : out.data() + (t - 1) * n;
      const T* c_prev = first ? zero.data() : cells->data() + (t - 1) * n;
      T* z = gates->data() + t * 4 * n;
      for (std::size_t j = 0; j < 4 * n; ++j) {
        z[j] = bd[j] + detail::dot(wx + j * m, xd + t * m, m) + detail::dot(wh + j * n, h_prev, n);
      }
      T* c = cells->data() + t * n;
      T* ct = cell_tanh->data() + t * n;
      T* h = out.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T ig = detail::sigmoid(z[j]);
        const T fg = detail::sigmoid(z[n + j]);
        const T cand = std::tanh(z[2 * n + j]);
        const T og = detail::sigmoid(z[3 * n + j]);
        z[j] = ig;
        z[n + j] = fg;
        z[2 * n + j] = cand;
        z[3 * n + j] = og;
        c[j] = fg * c_prev[j] + ig * cand;
        ct[j] = std::tanh(c[j]);
        h[j] = og * ct[j];
      }
    }
  }

  auto xn = x.node();
  auto wxn = weights.input_weight.node();
  auto whn = weights.recurrent_weight.node();
  auto bn = weights.bias.node();
  return detail::make_result<T>(
      {positions, n}, std::move(out),
      {x, weights.input_weight, weights.recurrent_weight, weights.bias},
      [=, offsets = std::move(offsets)](Node<T>& self) {
        T* gx = detail::grad_of(xn);
        T* gwx = detail::grad_of(wxn);
        T* gwh = detail::grad_of(whn);
        T* gb = detail::grad_of(bn);
        const T* xv = xn->data.data();
        const T* wxv = wxn->data.data();
        const T* whv = whn->data.data();
        std::vector<T> dh_next(n), dc_next(n), dz(4 * n), dh(n);
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          std::fill(dh_next.begin(), dh_next.end(), T(0));
          std::fill(dc_next.begin(), dc_next.end(), T(0));
          for (std::size_t t = offsets[s + 1]; t-- > offsets[s];) {
            const bool first = t == offsets[s];
            const T* act = gates->data() + t * 4 * n;
            const T* ct = cell_tanh->data() + t * n;
            const T* c_prev = first ? nullptr : cells->data() + (t - 1) * n;
            const T* h_prev = first ? nullptr : self.data.data() + (t - 1) * n;
            for (std::size_t j = 0; j < n; ++j) dh[j] = self.grad[t * n + j] + dh_next[j];
            for (std::size_t j = 0; j < n; ++j) {
              const T ig = act[j], fg = act[n + j], cand = act[2 * n + j], og = act[3 * n + j];
              const T dc = dc_next[j] + dh[j] * og * (T(1) - ct[j] * ct[j]);
              dz[j] = dc * cand * ig * (T(1) - ig);
              dz[n + j] = c_prev ? dc * c_prev[j] * fg * (T(1) - fg) : T(0);
              dz[2 * n + j] = dc * ig * (T(1) - cand * cand);
              dz[3 * n + j] = dh[j] * ct[j] * og * (T(1) - og);
              dc_next[j] = dc * fg;
            }
            std::fill(dh_next.begin(), dh_next.end(), T(0));
            for (std::size_t j = 0; j < 4 * n; ++j) {
              const T g = dz[j];
              if (g == T(0)) continue;
              if (gb) gb[j] += g;
              if (gwx) detail::axpy(gwx + j * m, xv + t * m, g, m);
              if (gx) detail::axpy(gx + t * m, wxv + j * m, g, m);
              if (h_prev) {
                if (gwh) detail::axpy(gwh + j * n, h_prev, g, n);
                detail::axpy(dh_next.data(), whv + j * n, g, n);
              }
            }
          }
        }
      });
}

/// One sequence: rows of tokens ([length, m]) to hidden states ([length, n]).
template <class T>
Value<T> seq_encode(const Value<T>& tokens, const LstmWeights<T>& weights) {
  if (tokens.rank() != 2) throw ContractViolation("seq_encode: empty sequence");
  return lstm_segments(tokens, {0, tokens.shape()[0]}, weights);
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy. Probabilities are clamped to [eps, 1-eps]; the
/// gradient is evaluated at the clamped point so saturated outputs still learn.
template <class T>
Value<T> bce_loss(const Value<T>& probabilities, std::span<const T> labels) {
  if (probabilities.size() != labels.size()) {
    throw DimensionError("bce_loss: " + std::to_string(probabilities.size()) +
                         " probabilities vs " + std::to_string(labels.size()) + " labels");
  }
  const T eps = static_cast<T>(kProbabilityClamp);
  const std::size_t count = labels.size();
  std::vector<T> y(labels.begin(), labels.end());
  T total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const T p = std::clamp(probabilities[i], eps, T(1) - eps);
    total -= y[i] * std::log(p) + (T(1) - y[i]) * std::log(T(1) - p);
  }
  auto pn = probabilities.node();
  return detail::make_result<T>(
      {1}, {total / static_cast<T>(count)}, {probabilities},
      [pn, y = std::move(y), eps](Node<T>& self) {
        T* g = detail::grad_of(pn);
        if (!g) return;
        const T scale = self.grad[0] / static_cast<T>(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
          const T p = std::clamp(pn->data[i], eps, T(1) - eps);
          g[i] += scale * (-y[i] / p + (T(1) - y[i]) / (T(1) - p));
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass

/// Populates grad on every value reachable from loss. Intermediate gradients
/// are reset at the start of each call; leaves (parameters) accumulate.
template <class T>
void backward(const Value<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractViolation("backward: loss must be a scalar");
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* node : order) {
    if (node->backward_fn) {
      node->ensure_grad();
      std::fill(node->grad.begin(), node->grad.end(), T(0));
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace graftnet::ad
