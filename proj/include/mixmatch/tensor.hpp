#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a graph node. Ops allocate a fresh node whose
// backward rule accumulates into its inputs. The graph is rebuilt on every
// training step and released when the last handle to the loss goes away.
// There is no implicit broadcasting: operands must agree exactly, and bias
// terms are widened with the explicit expand_* ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mixmatch {

/// A NaN or infinity reached an operation that requires finite values.
class NonFiniteError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  std::string op;
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // null for leaves

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T{0});
  }
};

[[noreturn]] inline void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

[[noreturn]] inline void shape_error(std::string_view op, const Shape& a, std::string_view what) {
  throw std::invalid_argument(std::string(op) + ": " + std::string(what) + ", got " +
                              shape_str(a));
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values) {
    return leaf(std::move(shape), std::move(values), false);
  }

  /// Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    return leaf(std::move(shape), std::move(values), true);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return leaf(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static Tensor scalar(T value) { return constant({}, {value}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->values.size(); }
  std::span<const T> values() const { return node_->values; }
  T operator[](std::size_t i) const { return node_->values[i]; }
  const std::string& op() const { return node_->op; }

  T item() const {
    if (node_->values.size() != 1)
      throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
    return node_->values[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Direct write access for optimizers and EMA; never call while a graph
  /// that reads this tensor is pending backward.
  std::span<T> mutable_values() { return node_->values; }

  /// Deep copy of values into a new leaf with the same requires_grad flag.
  Tensor clone() const {
    return leaf(node_->shape, node_->values, node_->requires_grad);
  }

  const NodePtr& node() const { return node_; }

  /// Builds an op result. `backward` is dropped when no input needs grads.
  static Tensor make(std::string op, Shape shape, std::vector<T> values,
                     std::vector<Tensor> inputs, std::function<void(detail::Node<T>&)> backward) {
    auto n = std::make_shared<detail::Node<T>>();
    n->op = std::move(op);
    n->shape = std::move(shape);
    n->values = std::move(values);
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
    if (n->requires_grad) {
      n->inputs.reserve(inputs.size());
      for (auto& in : inputs) n->inputs.push_back(in.node_);
      n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
  }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor leaf(Shape shape, std::vector<T> values, bool requires_grad) {
    if (values.size() != numel(shape))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node<T>>();
    n->op = "leaf";
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  NodePtr node_;
};

/// Reverse pass from a rank-0 tensor. Leaf gradients accumulate across calls;
/// intermediate gradients are recomputed from scratch each time.
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.rank() != 0)
    throw std::invalid_argument("backward: expected a scalar, got shape " +
                                shape_str(root.shape()));
  if (!root.requires_grad()) return;

  using Node = detail::Node<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->values.size(), T{0});
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename T>
void require_same(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

template <typename T>
void accumulate(Node<T>& target, std::span<const T> g) {
  if (!target.requires_grad) return;
  target.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) target.grad[i] += g[i];
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make("add", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    detail::accumulate<T>(*self.inputs[0], self.grad);
    detail::accumulate<T>(*self.inputs[1], self.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    detail::accumulate<T>(*self.inputs[0], self.grad);
    auto& rhs = *self.inputs[1];
    if (rhs.requires_grad) {
      rhs.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) rhs.grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      x.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * y.values[i];
    }
    if (y.requires_grad) {
      y.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) y.grad[i] += self.grad[i] * x.values[i];
    }
  });
}

/// Multiplication by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return Tensor<T>::make("scale", a.shape(), std::move(out), {a},
                         [factor](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           x.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             x.grad[i] += self.grad[i] * factor;
                         });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  return Tensor<T>::make("relu", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (x.values[i] > T{0}) x.grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
  return Tensor<T>::make("log", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] / x.values[i];
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return Tensor<T>::make("exp", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    x.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i] * self.values[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T v : a.values()) total += v;
  return Tensor<T>::make("sum", {}, {total}, {a}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    x.ensure_grad();
    for (auto& g : x.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    detail::shape_error("reshape", a.shape(), shape);
  std::vector<T> out(a.values().begin(), a.values().end());
  return Tensor<T>::make("reshape", std::move(shape), std::move(out), {a},
                         [](detail::Node<T>& self) {
                           detail::accumulate<T>(*self.inputs[0], self.grad);
                         });
}

/// Concatenation along axis 0; trailing dimensions must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat0: no inputs");
  Shape shape = parts.front().shape();
  if (shape.empty()) detail::shape_error("concat0", shape, "expected rank >= 1");
  shape[0] = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      detail::shape_error("concat0", parts.front().shape(), p.shape());
    shape[0] += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return Tensor<T>::make("concat0", std::move(shape), std::move(out), parts,
                         [](detail::Node<T>& self) {
                           std::size_t offset = 0;
                           for (auto& in : self.inputs) {
                             const std::size_t n = in->values.size();
                             if (in->requires_grad) {
                               in->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i)
                                 in->grad[i] += self.grad[offset + i];
                             }
                             offset += n;
                           }
                         });
}

/// Rows of `a` (first axis) at `indices`; repeats allowed.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> indices) {
  if (a.rank() == 0) detail::shape_error("gather_rows", a.shape(), "expected rank >= 1");
  const std::size_t rows = a.dim(0);
  const std::size_t width = rows ? a.size() / rows : 0;
  Shape shape = a.shape();
  shape[0] = indices.size();
  std::vector<T> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows)
      throw std::out_of_range("gather_rows: index " + std::to_string(indices[r]) +
                              " out of range for shape " + shape_str(a.shape()));
    std::copy_n(a.values().begin() + indices[r] * width, width, out.begin() + r * width);
  }
  return Tensor<T>::make("gather_rows", std::move(shape), std::move(out), {a},
                         [indices = std::move(indices), width](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           x.ensure_grad();
                           for (std::size_t r = 0; r < indices.size(); ++r)
                             for (std::size_t j = 0; j < width; ++j)
                               x.grad[indices[r] * width + j] += self.grad[r * width + j];
                         });
}

/// Multiplies row i (first axis) by the constant weights[i].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& a, std::vector<T> weights) {
  if (a.rank() == 0 || weights.size() != a.dim(0))
    detail::shape_error("scale_rows", a.shape(), Shape{weights.size()});
  const std::size_t width = a.dim(0) ? a.size() / a.dim(0) : 0;
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < weights.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = a[r * width + j] * weights[r];
  return Tensor<T>::make("scale_rows", a.shape(), std::move(out), {a},
                         [weights = std::move(weights), width](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           x.ensure_grad();
                           for (std::size_t r = 0; r < weights.size(); ++r)
                             for (std::size_t j = 0; j < width; ++j)
                               x.grad[r * width + j] += self.grad[r * width + j] * weights[r];
                         });
}

/// [F] -> [rows, F] by repetition.
template <typename T>
Tensor<T> expand_rows(const Tensor<T>& bias, std::size_t rows) {
  if (bias.rank() != 1) detail::shape_error("expand_rows", bias.shape(), "expected rank 1");
  const std::size_t width = bias.dim(0);
  std::vector<T> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias.values().begin(), bias.values().end(), out.begin() + r * width);
  return Tensor<T>::make("expand_rows", {rows, width}, std::move(out), {bias},
                         [rows, width](detail::Node<T>& self) {
                           auto& b = *self.inputs[0];
                           b.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < width; ++j)
                               b.grad[j] += self.grad[r * width + j];
                         });
}

/// [C] -> [N, C, H, W] by repetition over batch and spatial axes.
template <typename T>
Tensor<T> expand_channels(const Tensor<T>& bias, std::size_t batch, std::size_t height,
                          std::size_t width) {
  if (bias.rank() != 1) detail::shape_error("expand_channels", bias.shape(), "expected rank 1");
  const std::size_t channels = bias.dim(0);
  const std::size_t plane = height * width;
  std::vector<T> out(batch * channels * plane);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      std::fill_n(out.begin() + (n * channels + c) * plane, plane, bias[c]);
  return Tensor<T>::make("expand_channels", {batch, channels, height, width}, std::move(out),
                         {bias}, [batch, channels, plane](detail::Node<T>& self) {
                           auto& b = *self.inputs[0];
                           b.ensure_grad();
                           for (std::size_t n = 0; n < batch; ++n)
                             for (std::size_t c = 0; c < channels; ++c) {
                               const T* g = self.grad.data() + (n * channels + c) * plane;
                               T acc{0};
                               for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                               b.grad[c] += acc;
                             }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    detail::shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T{0});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return Tensor<T>::make("matmul", {m, n}, std::move(out), {a, b},
                         [m, k, n](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           auto& y = *self.inputs[1];
                           const T* g = self.grad.data();
                           if (x.requires_grad) {
                             x.ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const T* yrow = y.values.data() + p * n;
                                 const T* grow = g + i * n;
                                 T acc{0};
                                 for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
                                 x.grad[i * k + p] += acc;
                               }
                           }
                           if (y.requires_grad) {
                             y.ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const T s = x.values[i * k + p];
                                 const T* grow = g + i * n;
                                 T* yg = y.grad.data() + p * n;
                                 for (std::size_t j = 0; j < n; ++j) yg[j] += s * grow[j];
                               }
                           }
                         });
}

/// 2-D cross-correlation, stride 1, symmetric zero padding.
/// input [N, C, H, W], kernel [O, C, KH, KW] -> [N, O, H + 2p - KH + 1, W + 2p - KW + 1].
/// Each example is unfolded into a [C*KH*KW, OH*OW] column matrix so that the
/// forward and both backward products run over contiguous rows.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1))
    detail::shape_error("conv2d", input.shape(), kernel.shape());
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    detail::shape_error("conv2d", input.shape(), kernel.shape());
  const std::size_t oh = h + 2 * padding - kh + 1, ow = w + 2 * padding - kw + 1;
  const std::size_t taps = cin * kh * kw, pixels = oh * ow;

  // Calls body(row, y, x, source offset) for every in-bounds column entry.
  auto for_each_column = [=](auto&& body) {
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::size_t row = (c * kh + ky) * kw + kx;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(padding);
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(padding);
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              body(row, y * ow + x, (c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx));
            }
          }
        }
  };
  auto unfold = [=](const T* image, std::vector<T>& cols) {
    std::fill(cols.begin(), cols.end(), T{0});
    for_each_column([&](std::size_t row, std::size_t px, std::size_t src) {
      cols[row * pixels + px] = image[src];
    });
  };

  std::vector<T> out(batch * cout * pixels, T{0});
  std::vector<T> cols(taps * pixels);
  const T* ker = kernel.values().data();
  for (std::size_t n = 0; n < batch; ++n) {
    unfold(input.values().data() + n * cin * h * w, cols);
    T* dst = out.data() + n * cout * pixels;
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < taps; ++t) {
        const T k = ker[o * taps + t];
        const T* col = cols.data() + t * pixels;
        T* row = dst + o * pixels;
        for (std::size_t p = 0; p < pixels; ++p) row[p] += k * col[p];
      }
  }

  return Tensor<T>::make(
      "conv2d", {batch, cout, oh, ow}, std::move(out), {input, kernel},
      [=](detail::Node<T>& self) {
        auto& xi = *self.inputs[0];
        auto& ki = *self.inputs[1];
        if (xi.requires_grad) xi.ensure_grad();
        if (ki.requires_grad) ki.ensure_grad();
        std::vector<T> cols(taps * pixels), dcols(taps * pixels);
        for (std::size_t n = 0; n < batch; ++n) {
          const T* g = self.grad.data() + n * cout * pixels;
          if (ki.requires_grad) {
            unfold(xi.values.data() + n * cin * h * w, cols);
            for (std::size_t o = 0; o < cout; ++o)
              for (std::size_t t = 0; t < taps; ++t) {
                const T* col = cols.data() + t * pixels;
                const T* gr = g + o * pixels;
                T acc{0};
                for (std::size_t p = 0; p < pixels; ++p) acc += gr[p] * col[p];
                ki.grad[o * taps + t] += acc;
              }
          }
          if (xi.requires_grad) {
            std::fill(dcols.begin(), dcols.end(), T{0});
            for (std::size_t o = 0; o < cout; ++o)
              for (std::size_t t = 0; t < taps; ++t) {
                const T k = ki.values[o * taps + t];
                const T* gr = g + o * pixels;
                T* dc = dcols.data() + t * pixels;
                for (std::size_t p = 0; p < pixels; ++p) dc[p] += k * gr[p];
              }
            T* dx = xi.grad.data() + n * cin * h * w;
            for_each_column([&](std::size_t row, std::size_t px, std::size_t src) {
              dx[src] += dcols[row * pixels + px];
            });
          }
        }
      });
}

/// 2x2 average pooling with stride 2; H and W must be even.
template <typename T>
Tensor<T> mean_pool2(const Tensor<T>& input) {
  if (input.rank() != 4 || input.dim(2) % 2 || input.dim(3) % 2)
    detail::shape_error("mean_pool2", input.shape(), "expected [N,C,H,W] with even H and W");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3), oh = h / 2, ow = w / 2;
  std::vector<T> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        const T* s = input.values().data() + p * h * w + 2 * y * w + 2 * x;
        out[(p * oh + y) * ow + x] = (s[0] + s[1] + s[w] + s[w + 1]) * T{0.25};
      }
  return Tensor<T>::make("mean_pool2", {input.dim(0), input.dim(1), oh, ow}, std::move(out),
                         {input}, [=](detail::Node<T>& self) {
                           auto& xi = *self.inputs[0];
                           xi.ensure_grad();
                           for (std::size_t p = 0; p < planes; ++p)
                             for (std::size_t y = 0; y < oh; ++y)
                               for (std::size_t x = 0; x < ow; ++x) {
                                 const T g = self.grad[(p * oh + y) * ow + x] * T{0.25};
                                 T* d = xi.grad.data() + p * h * w + 2 * y * w + 2 * x;
                                 d[0] += g;
                                 d[1] += g;
                                 d[w] += g;
                                 d[w + 1] += g;
                               }
                         });
}

// ---------------------------------------------------------------------------
// Probability ops (over the last axis)

namespace detail {

template <typename T>
std::size_t class_axis(std::string_view op, const Tensor<T>& a) {
  if (a.rank() == 0 || a.shape().back() < 2)
    shape_error(op, a.shape(), "expected a last axis of size >= 2");
  for (T v : a.values())
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite input");
  return a.shape().back();
}

}  // namespace detail

/// Row-wise softmax, stabilized by subtracting the row maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const std::size_t classes = detail::class_axis("softmax", logits);
  const std::size_t rows = logits.size() / classes;
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.values().data() + r * classes;
    T* y = out.data() + r * classes;
    const T peak = *std::max_element(z, z + classes);
    T total{0};
    for (std::size_t j = 0; j < classes; ++j) total += (y[j] = std::exp(z[j] - peak));
    for (std::size_t j = 0; j < classes; ++j) y[j] /= total;
  }
  return Tensor<T>::make("softmax", logits.shape(), std::move(out), {logits},
                         [rows, classes](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           x.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* y = self.values.data() + r * classes;
                             const T* g = self.grad.data() + r * classes;
                             T dot{0};
                             for (std::size_t j = 0; j < classes; ++j) dot += g[j] * y[j];
                             for (std::size_t j = 0; j < classes; ++j)
                               x.grad[r * classes + j] += y[j] * (g[j] - dot);
                           }
                         });
}

/// Row-wise log-softmax via log-sum-exp.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  const std::size_t classes = detail::class_axis("log_softmax", logits);
  const std::size_t rows = logits.size() / classes;
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.values().data() + r * classes;
    const T peak = *std::max_element(z, z + classes);
    T total{0};
    for (std::size_t j = 0; j < classes; ++j) total += std::exp(z[j] - peak);
    const T lse = peak + std::log(total);
    for (std::size_t j = 0; j < classes; ++j) out[r * classes + j] = z[j] - lse;
  }
  return Tensor<T>::make("log_softmax", logits.shape(), std::move(out), {logits},
                         [rows, classes](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           x.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* ly = self.values.data() + r * classes;
                             const T* g = self.grad.data() + r * classes;
                             T gsum{0};
                             for (std::size_t j = 0; j < classes; ++j) gsum += g[j];
                             for (std::size_t j = 0; j < classes; ++j)
                               x.grad[r * classes + j] += g[j] - std::exp(ly[j]) * gsum;
                           }
                         });
}

/// Identity on values; a constant for differentiation.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), std::vector<T>(a.values().begin(), a.values().end()));
}

/// Row-wise temperature sharpening p_i^(1/T) / sum_j p_j^(1/T), computed in
/// the log domain. Zero entries stay exactly zero and receive no gradient.
template <typename T>
Tensor<T> sharpen_rows(const Tensor<T>& probs, T temperature) {
  if (!(temperature > T{0}))
    throw std::invalid_argument("sharpen: temperature must be > 0");
  if (probs.rank() == 0) detail::shape_error("sharpen", probs.shape(), "expected rank >= 1");
  const std::size_t classes = probs.shape().back();
  const std::size_t rows = classes ? probs.size() / classes : 0;
  const T inv_t = T{1} / temperature;
  std::vector<T> out(probs.size(), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = probs.values().data() + r * classes;
    T* q = out.data() + r * classes;
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < classes; ++j)
      if (p[j] > T{0}) peak = std::max(peak, inv_t * std::log(p[j]));
    if (!std::isfinite(peak)) continue;
    T total{0};
    for (std::size_t j = 0; j < classes; ++j)
      if (p[j] > T{0}) total += (q[j] = std::exp(inv_t * std::log(p[j]) - peak));
    for (std::size_t j = 0; j < classes; ++j) q[j] /= total;
  }
  return Tensor<T>::make("sharpen", probs.shape(), std::move(out), {probs},
                         [rows, classes, inv_t](detail::Node<T>& self) {
                           auto& x = *self.inputs[0];
                           x.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* q = self.values.data() + r * classes;
                             const T* g = self.grad.data() + r * classes;
                             const T* p = x.values.data() + r * classes;
                             T dot{0};
                             for (std::size_t j = 0; j < classes; ++j) dot += g[j] * q[j];
                             for (std::size_t j = 0; j < classes; ++j)
                               if (p[j] > T{0})
                                 x.grad[r * classes + j] += inv_t * q[j] * (g[j] - dot) / p[j];
                           }
                         });
}

}  // namespace mixmatch
