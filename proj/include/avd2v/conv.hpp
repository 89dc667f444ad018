#pragma once

// Volumetric primitives for the video front end. Activations are laid out
// channel-major as [C × T × H × W]; a kernel with temporal depth 1 acts as an
// independent 2D convolution on every frame.

#include <array>
#include <limits>

#include "avd2v/tensor.hpp"

namespace avd2v {

using Dims3 = std::array<std::size_t, 3>;  // (t, h, w)

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* op) {
  if (in + 2 * pad < k)
    throw DimensionError(std::string(op) + ": input extent " + std::to_string(in) + " too small for kernel " +
                         std::to_string(k));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

/// x[C×T×H×W] ⊛ w[O×C×kt×kh×kw] (+ bias[O]) → [O×T'×H'×W'] via im2col + GEMM.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Dims3 stride, Dims3 pad) {
  detail::require_rank(x, 4, "conv3d");
  detail::require_rank(w, 5, "conv3d");
  const std::size_t C = x.dim(0), Ti = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const std::size_t O = w.dim(0);
  if (w.dim(1) != C) throw DimensionError("conv3d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const std::size_t kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const std::size_t To = detail::conv_out(Ti, kt, stride[0], pad[0], "conv3d");
  const std::size_t Ho = detail::conv_out(Hi, kh, stride[1], pad[1], "conv3d");
  const std::size_t Wo = detail::conv_out(Wi, kw, stride[2], pad[2], "conv3d");
  const std::size_t K = C * kt * kh * kw;
  const std::size_t P = To * Ho * Wo;

  // Calls fn(cols index, input index) for every in-bounds tap.
  auto for_each_tap = [=](auto&& fn) {
    std::size_t r = 0;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t a = 0; a < kt; ++a)
        for (std::size_t b = 0; b < kh; ++b)
          for (std::size_t d = 0; d < kw; ++d, ++r)
            for (std::size_t t = 0; t < To; ++t) {
              const std::ptrdiff_t it = std::ptrdiff_t(t * stride[0] + a) - std::ptrdiff_t(pad[0]);
              if (it < 0 || it >= std::ptrdiff_t(Ti)) continue;
              for (std::size_t h = 0; h < Ho; ++h) {
                const std::ptrdiff_t ih = std::ptrdiff_t(h * stride[1] + b) - std::ptrdiff_t(pad[1]);
                if (ih < 0 || ih >= std::ptrdiff_t(Hi)) continue;
                const std::size_t base = ((c * Ti + std::size_t(it)) * Hi + std::size_t(ih)) * Wi;
                const std::size_t col0 = (t * Ho + h) * Wo;
                for (std::size_t ww = 0; ww < Wo; ++ww) {
                  const std::ptrdiff_t iw = std::ptrdiff_t(ww * stride[2] + d) - std::ptrdiff_t(pad[2]);
                  if (iw < 0 || iw >= std::ptrdiff_t(Wi)) continue;
                  fn(r * P + col0 + ww, base + std::size_t(iw));
                }
              }
            }
  };
  std::vector<T> cols(K * P, T(0));
  {
    const T* xd = x.data().data();
    for_each_tap([&](std::size_t i, std::size_t src) { cols[i] = xd[src]; });
  }

  std::vector<T> out(O * P);
  using detail::MapConstMat;
  using detail::MapMat;
  MapMat<T>(out.data(), O, P).noalias() =
      MapConstMat<T>(w.data().data(), O, K) * MapConstMat<T>(cols.data(), K, P);
  if (bias.defined()) {
    if (bias.numel() != O) throw DimensionError("conv3d: bias length mismatch");
    auto bd = bias.data();
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t p = 0; p < P; ++p) out[o * P + p] += bd[o];
  }
  auto px = x.node(), pw = w.node();
  Node<T>* pbias = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<T>(
      {O, To, Ho, Wo}, std::move(out), std::move(parents),
      [px, pw, pbias, O, K, P, cols = std::move(cols), for_each_tap](Node<T>& self) {
        MapConstMat<T> G(self.grad.data(), O, P);
        if (pw->requires_grad)
          MapMat<T>(pw->grad_buffer(), O, K).noalias() += G * MapConstMat<T>(cols.data(), K, P).transpose();
        if (pbias && pbias->requires_grad) {
          T* gb = pbias->grad_buffer();
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t p = 0; p < P; ++p) gb[o] += self.grad[o * P + p];
        }
        if (px->requires_grad) {
          std::vector<T> dcols(K * P);
          MapMat<T>(dcols.data(), K, P).noalias() = MapConstMat<T>(pw->data.data(), O, K).transpose() * G;
          T* gx = px->grad_buffer();
          for_each_tap([&](std::size_t i, std::size_t src) { gx[src] += dcols[i]; });
        }
      },
      "conv3d");
}

/// Per-channel normalization of x[C×...]. In training mode the statistics
/// come from the input and the running buffers are updated in place; in eval
/// mode the running buffers are used.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const std::size_t C = x.dim(0);
  const std::size_t n = x.numel() / C;
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
    throw DimensionError("batch_norm: parameter length mismatch");
  if (n == 0) throw DimensionError("batch_norm: empty input");
  std::vector<T> rstd(C), xhat(x.numel()), out(x.numel());
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t c = 0; c < C; ++c) {
    const T* row = xd.data() + c * n;
    T mu, var;
    if (training) {
      mu = 0;
      for (std::size_t i = 0; i < n; ++i) mu += row[i];
      mu /= T(n);
      var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
      var /= T(n);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const T unbiased = n > 1 ? var * T(n) / T(n - 1) : var;
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    rstd[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      xhat[c * n + i] = (row[i] - mu) * rstd[c];
      out[c * n + i] = xhat[c * n + i] * gd[c] + bd[c];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, C, n, training, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const T* dy = self.grad.data();
        T* gg = pg->requires_grad ? pg->grad_buffer() : nullptr;
        T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
        T* gx = px->requires_grad ? px->grad_buffer() : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
          T sum_d = 0, sum_dx = 0;
          for (std::size_t i = 0; i < n; ++i) {
            sum_d += dy[c * n + i];
            sum_dx += dy[c * n + i] * xhat[c * n + i];
          }
          if (gg) gg[c] += sum_dx;
          if (gb) gb[c] += sum_d;
          if (!gx) continue;
          const T g = pg->data[c];
          if (training) {
            const T md = sum_d / T(n), mdx = sum_dx / T(n);
            for (std::size_t i = 0; i < n; ++i)
              gx[c * n + i] += g * rstd[c] * (dy[c * n + i] - md - xhat[c * n + i] * mdx);
          } else {
            for (std::size_t i = 0; i < n; ++i) gx[c * n + i] += g * rstd[c] * dy[c * n + i];
          }
        }
      },
      "batch_norm");
}

/// Channel-wise parametric ReLU on x[C×...].
template <class T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& alpha) {
  const std::size_t C = x.dim(0);
  if (alpha.numel() != C) throw DimensionError("prelu: slope count mismatch");
  const std::size_t n = x.numel() / C;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  auto ad = alpha.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const T v = xd[c * n + i];
      out[c * n + i] = v > T(0) ? v : ad[c] * v;
    }
  auto px = x.node(), pa = alpha.node();
  return detail::make_result<T>(x.shape(), std::move(out), {x, alpha}, [px, pa, C, n](Node<T>& self) {
    T* gx = px->requires_grad ? px->grad_buffer() : nullptr;
    T* ga = pa->requires_grad ? pa->grad_buffer() : nullptr;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = c * n + i;
        const T v = px->data[k];
        if (v > T(0)) {
          if (gx) gx[k] += self.grad[k];
        } else {
          if (gx) gx[k] += self.grad[k] * pa->data[c];
          if (ga) ga[c] += self.grad[k] * v;
        }
      }
  }, "prelu");
}

/// Max pooling over [C×T×H×W]; padded cells never win.
template <class T>
Tensor<T> max_pool3d(const Tensor<T>& x, Dims3 kernel, Dims3 stride, Dims3 pad) {
  detail::require_rank(x, 4, "max_pool3d");
  const std::size_t C = x.dim(0), Ti = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const std::size_t To = detail::conv_out(Ti, kernel[0], stride[0], pad[0], "max_pool3d");
  const std::size_t Ho = detail::conv_out(Hi, kernel[1], stride[1], pad[1], "max_pool3d");
  const std::size_t Wo = detail::conv_out(Wi, kernel[2], stride[2], pad[2], "max_pool3d");
  std::vector<T> out(C * To * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  auto xd = x.data();
  std::size_t o = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t w = 0; w < Wo; ++w, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          bool found = false;
          for (std::size_t a = 0; a < kernel[0]; ++a)
            for (std::size_t b = 0; b < kernel[1]; ++b)
              for (std::size_t d = 0; d < kernel[2]; ++d) {
                const std::ptrdiff_t it = std::ptrdiff_t(t * stride[0] + a) - std::ptrdiff_t(pad[0]);
                const std::ptrdiff_t ih = std::ptrdiff_t(h * stride[1] + b) - std::ptrdiff_t(pad[1]);
                const std::ptrdiff_t iw = std::ptrdiff_t(w * stride[2] + d) - std::ptrdiff_t(pad[2]);
                if (it < 0 || ih < 0 || iw < 0 || it >= std::ptrdiff_t(Ti) || ih >= std::ptrdiff_t(Hi) ||
                    iw >= std::ptrdiff_t(Wi))
                  continue;
                const std::size_t idx = ((c * Ti + std::size_t(it)) * Hi + std::size_t(ih)) * Wi + std::size_t(iw);
                if (!found || xd[idx] > best) {
                  best = xd[idx];
                  best_i = idx;
                  found = true;
                }
              }
          out[o] = best;
          arg[o] = best_i;
        }
  auto px = x.node();
  return detail::make_result<T>({C, To, Ho, Wo}, std::move(out), {x}, [px, arg = std::move(arg)](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  }, "max_pool3d");
}

/// Averages each frame's spatial map: [C×T×H×W] → [T×C].
template <class T>
Tensor<T> spatial_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "spatial_avg_pool");
  const std::size_t C = x.dim(0), Tn = x.dim(1), S = x.dim(2) * x.dim(3);
  std::vector<T> out(Tn * C, T(0));
  auto xd = x.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < Tn; ++t) {
      T s = 0;
      for (std::size_t i = 0; i < S; ++i) s += xd[(c * Tn + t) * S + i];
      out[t * C + c] = s / T(S);
    }
  auto px = x.node();
  return detail::make_result<T>({Tn, C}, std::move(out), {x}, [px, C, Tn, S](Node<T>& self) {
    T* g = px->grad_buffer();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < Tn; ++t) {
        const T d = self.grad[t * C + c] / T(S);
        for (std::size_t i = 0; i < S; ++i) g[(c * Tn + t) * S + i] += d;
      }
  }, "spatial_avg_pool");
}

}  // namespace avd2v
