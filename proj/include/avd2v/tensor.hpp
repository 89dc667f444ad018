#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every op that sees at least one input with requires_grad (while grad mode
// is enabled) records its parents and a backward rule on the result node.
// backward() orders the reachable nodes topologically and replays the rules
// in reverse, so each node is visited exactly once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "avd2v/errors.hpp"
#include "avd2v/random.hpp"

namespace avd2v {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Grad mode is per thread: a tape never crosses executors.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->data.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.n_->data.begin(), t.n_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.n_->data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t numel() const { return n_->data.size(); }
  std::size_t rows() const { return n_->shape.at(0); }
  std::size_t cols() const { return n_->shape.at(1); }

  std::span<const T> data() const { return n_->data; }
  // Writes bypass the tape; only for leaves and freshly built constants.
  std::span<T> mutable_data() { return n_->data; }
  std::vector<T>& storage() { return n_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    return n_->data[0];
  }
  T at(std::size_t i, std::size_t j) const { return n_->data[i * cols() + j]; }
  T& at(std::size_t i, std::size_t j) { return n_->data[i * cols() + j]; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool on) { n_->requires_grad = on; }
  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const T> grad() const { return n_->grad; }
  std::span<T> mutable_grad() { return {n_->grad_buffer(), n_->data.size()}; }
  void zero_grad() { n_->grad.clear(); }
  bool is_leaf() const { return n_->parents.empty(); }

  /// Same values, no history.
  Tensor detach() const { return from(n_->shape, n_->data, false); }

  Tensor clone_leaf(bool requires_grad) const { return from(n_->shape, n_->data, requires_grad); }

  bool all_finite() const {
    return std::all_of(n_->data.begin(), n_->data.end(), [](T v) { return std::isfinite(v); });
  }

  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward, const char* op) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool track = GradMode::enabled() &&
               std::any_of(parents.begin(), parents.end(),
                           [](const Tensor<T>& p) { return p.defined() && p.requires_grad(); });
  if (track) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t r, const char* op) {
  if (a.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
}

// Decomposes a shape around `axis` into (outer, length, inner) extents.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    const std::size_t n = self.data.size();
    if (pa->requires_grad) {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
  }, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    const std::size_t n = self.data.size();
    if (pa->requires_grad) {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
    }
  }, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    const std::size_t n = self.data.size();
    if (pa->requires_grad) {
      T* g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pa->data[i];
    }
  }, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  auto pa = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [pa, s](Node<T>& self) {
    T* g = pa->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += self.grad[i] * s;
  }, "scale");
}

/// x[m×n] + b[n] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_rank(x, 2, "add_bias");
  if (b.numel() != x.cols())
    throw DimensionError("add_bias: bias length " + std::to_string(b.numel()) + " vs " + std::to_string(x.cols()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bd[j];
  auto px = x.node(), pb = b.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x, b}, [px, pb, m, n](Node<T>& self) {
    if (px->requires_grad) {
      T* g = px->grad_buffer();
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      T* g = pb->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  }, "add_bias");
}

/// Multiplies row i of x by the constant weights[i].
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, std::vector<T> weights) {
  detail::require_rank(x, 2, "scale_rows");
  if (weights.size() != x.rows()) throw DimensionError("scale_rows: weight count mismatch");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= weights[i];
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [px, m, n, w = std::move(weights)](Node<T>& self) {
                                  T* g = px->grad_buffer();
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * w[i];
                                },
                                "scale_rows");
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [px](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i)
      if (px->data[i] > T(0)) g[i] += self.grad[i];
  }, "relu");
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [px](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const T v = px->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  }, "gelu");
}

/// Inverted dropout. In eval mode (or p == 0) the input is returned as is.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : T(0);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [px, mask = std::move(mask)](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += self.grad[i] * mask[i];
  }, "dropout");
}

// ---------------------------------------------------------------------------
// Linear algebra

/// op(A)·op(B) for rank-2 tensors, op = transpose when the flag is set.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + (trans_a ? "^T" : "") + " x " +
                         shape_str(b.shape()) + (trans_b ? "^T" : ""));
  std::vector<T> out(m * n);
  using detail::MapConstMat;
  using detail::MapMat;
  MapConstMat<T> A(a.data().data(), a.rows(), a.cols());
  MapConstMat<T> B(b.data().data(), b.rows(), b.cols());
  MapMat<T> C(out.data(), m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();

  auto pa = a.node(), pb = b.node();
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [pa, pb, m, n, trans_a, trans_b](Node<T>& self) {
    MapConstMat<T> G(self.grad.data(), m, n);
    const std::size_t ar = pa->shape[0], ac = pa->shape[1];
    const std::size_t br = pb->shape[0], bc = pb->shape[1];
    MapConstMat<T> A(pa->data.data(), ar, ac);
    MapConstMat<T> B(pb->data.data(), br, bc);
    if (pa->requires_grad) {
      MapMat<T> GA(pa->grad_buffer(), ar, ac);
      if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
      else if (!trans_a && trans_b) GA.noalias() += G * B;
      else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
      else GA.noalias() += B.transpose() * G.transpose();
    }
    if (pb->requires_grad) {
      MapMat<T> GB(pb->grad_buffer(), br, bc);
      if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
      else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
      else if (trans_a && !trans_b) GB.noalias() += A * G;
      else GB.noalias() += G.transpose() * A.transpose();
    }
  }, "matmul");
}

/// x·W + b with W stored [in × out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n);
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xd[i * n + j];
  auto px = x.node();
  return detail::make_result<T>({n, m}, std::move(out), {x}, [px, m, n](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  }, "transpose");
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto px = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {x}, [px](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += self.grad[i];
  }, "reshape");
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Softmax along `axis`, stabilized by subtracting the running max.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  if (!x.all_finite()) throw NumericError("softmax: non-finite input");
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xd[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      T sum = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= sum;
    }
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [px, outer, len, inner](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * self.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
  }, "softmax");
}

/// Per-row standardization of x[U×D] followed by a per-dimension affine.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("layer_norm: D must be >= 1");
  if (gamma.numel() != n || beta.numel() != n) throw DimensionError("layer_norm: affine length mismatch");
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  std::vector<T> xhat(m * n), rstd(m), out(m * n);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xd.data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const T* dy = self.grad.data();
        if (pg->requires_grad || pb->requires_grad) {
          T* gg = pg->requires_grad ? pg->grad_buffer() : nullptr;
          T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) gg[j] += dy[i * n + j] * xhat[i * n + j];
              if (gb) gb[j] += dy[i * n + j];
            }
        }
        if (px->requires_grad) {
          T* gx = px->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T d = dy[i * n + j] * pg->data[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = dy[i * n + j] * pg->data[j];
              gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      },
      "layer_norm");
}

/// Sets entries above the diagonal to a large negative value so a following
/// softmax gives them zero weight. Gradients pass only through kept entries.
template <class T>
Tensor<T> causal_mask(const Tensor<T>& x) {
  detail::require_rank(x, 2, "causal_mask");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] = T(-1e9);
  auto px = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [px, m, n](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j <= i && j < n; ++j) g[i * n + j] += self.grad[i * n + j];
  }, "causal_mask");
}

// ---------------------------------------------------------------------------
// Indexing, concatenation, reductions

/// Rows of table[V×D] gathered by id.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw DimensionError("embedding: id " + std::to_string(ids[i]) + " >= " + std::to_string(v));
    std::copy_n(td.data() + ids[i] * d, d, out.data() + i * d);
  }
  auto pt = table.node();
  return detail::make_result<T>({ids.size(), d}, std::move(out), {table}, [pt, ids, d](Node<T>& self) {
    T* g = pt->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += self.grad[i * d + j];
  }, "embedding");
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  Shape shape = ref;
  shape.at(axis) = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) throw DimensionError("concat: shape mismatch off-axis");
    shape[axis] += p.dim(axis);
  }
  std::size_t outer, total, inner;
  detail::split_axis(shape, axis, outer, total, inner);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * len * inner, len * inner, out.data() + (o * total + off) * inner);
    off += len;
  }
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>(std::move(shape), std::move(out), parts,
                                [nodes, offsets, outer, total, inner, axis](Node<T>& self) {
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    Node<T>* p = nodes[k];
                                    if (!p->requires_grad) continue;
                                    const std::size_t len = p->shape[axis];
                                    T* g = p->grad_buffer();
                                    for (std::size_t o = 0; o < outer; ++o) {
                                      const T* src = self.grad.data() + (o * total + offsets[k]) * inner;
                                      T* dst = g + o * len * inner;
                                      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                                    }
                                  }
                                },
                                "concat");
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  if (begin > end || end > len)
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         std::to_string(len));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t w = end - begin;
  std::vector<T> out(outer * w * inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xd.data() + (o * len + begin) * inner, w * inner, out.data() + o * w * inner);
  auto px = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {x},
                                [px, outer, len, inner, begin, w](Node<T>& self) {
                                  T* g = px->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    const T* src = self.grad.data() + o * w * inner;
                                    T* dst = g + (o * len + begin) * inner;
                                    for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
                                  }
                                },
                                "slice");
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto px = x.node();
  return detail::make_result<T>({1}, {s}, {x}, [px](Node<T>& self) {
    T* g = px->grad_buffer();
    const T d = self.grad[0];
    for (std::size_t i = 0; i < px->data.size(); ++i) g[i] += d;
  }, "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

/// Mean token cross-entropy of logits[S×V] against target ids; positions
/// whose target equals `ignore` are not counted.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets, std::size_t ignore) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t S = logits.rows(), V = logits.cols();
  if (targets.size() != S) throw DimensionError("cross_entropy: target length mismatch");
  std::vector<T> prob(S * V);
  auto ld = logits.data();
  T total = 0;
  std::size_t counted = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const T* row = ld.data() + s * V;
    const T mx = *std::max_element(row, row + V);
    T z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t v = 0; v < V; ++v) prob[s * V + v] = std::exp(row[v] - lse);
    if (targets[s] == ignore) continue;
    if (targets[s] >= V) throw DimensionError("cross_entropy: target id out of range");
    total += lse - row[targets[s]];
    ++counted;
  }
  const T denom = T(std::max<std::size_t>(counted, 1));
  auto pl = logits.node();
  return detail::make_result<T>({1}, {total / denom}, {logits},
                                [pl, S, V, targets, ignore, denom, prob = std::move(prob)](Node<T>& self) {
                                  T* g = pl->grad_buffer();
                                  const T d = self.grad[0] / denom;
                                  for (std::size_t s = 0; s < S; ++s) {
                                    if (targets[s] == ignore) continue;
                                    for (std::size_t v = 0; v < V; ++v) g[s * V + v] += d * prob[s * V + v];
                                    g[s * V + targets[s]] -= d;
                                  }
                                },
                                "cross_entropy");
}

// ---------------------------------------------------------------------------
// Backward

/// Nodes reachable from `root` through requires_grad edges, parents first.
template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Populates grad on every requires_grad leaf reachable from a scalar loss.
/// Leaf gradients accumulate across calls; clear them with zero_grad().
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  Node<T>* root = loss.node();
  auto order = topological_order(root);
  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are scratch; drop them so a second backward over a
  // shared subgraph starts clean.
  for (Node<T>* n : order)
    if (!n->parents.empty()) n->grad.clear();
}

}  // namespace avd2v
