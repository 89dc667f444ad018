#pragma once

// EMA teacher maintenance and contextualized regression targets.

#include <algorithm>
#include <cmath>
#include <vector>

#include "avd2v/encoder.hpp"

namespace avd2v {

struct EmaSchedule {
  double tau_start = 0.999;
  double tau_end = 0.99999;
  std::size_t anneal_steps = 100000;

  void validate() const {
    if (!(0.0 <= tau_start && tau_start <= tau_end && tau_end <= 1.0))
      throw ConfigError("ema: need 0 <= tau_start <= tau_end <= 1");
  }
};

inline double tau_at(const EmaSchedule& s, std::size_t step) {
  if (s.anneal_steps == 0 || step >= s.anneal_steps) return s.anneal_steps == 0 ? s.tau_start : s.tau_end;
  return s.tau_start + (s.tau_end - s.tau_start) * (double(step) / double(s.anneal_steps));
}

/// θ_T ← τ·θ_T + (1−τ)·θ_S, leaf by leaf. The student is read only.
template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double tau) {
  if (!teacher.same_structure(student)) throw ContractError("ema_update: teacher/student structure differs");
  if (tau == 1.0) return;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher.entries()[i].value.mutable_data();
    auto s = student.entries()[i].value.data();
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<T>(tau * double(t[j]) + (1.0 - tau) * double(s[j]));
  }
}

/// Per-dimension standardization over the rows of x[U×D] (no affine).
template <class T>
std::vector<T> instance_norm(std::span<const T> x, std::size_t U, std::size_t D, double eps = 1e-5) {
  if (U == 0) throw DimensionError("instance_norm: U must be >= 1");
  if (x.size() != U * D) throw DimensionError("instance_norm: size mismatch");
  std::vector<T> out(U * D);
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0;
    for (std::size_t t = 0; t < U; ++t) mean += double(x[t * D + d]);
    mean /= double(U);
    double var = 0;
    for (std::size_t t = 0; t < U; ++t) var += (double(x[t * D + d]) - mean) * (double(x[t * D + d]) - mean);
    var /= double(U);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t t = 0; t < U; ++t) out[t * D + d] = T((double(x[t * D + d]) - mean) * inv);
  }
  return out;
}

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, double eps = 1e-5) {
  detail::require_rank(x, 2, "instance_norm");
  return Tensor<T>::from(x.shape(), instance_norm<T>(x.data(), x.rows(), x.cols(), eps));
}

template <class T>
struct TargetRepresentation {
  Tensor<T> y;  // detached [U×D]
  std::size_t k_used = 0;
  std::vector<std::size_t> source_blocks;  // 1-based block indices N−K+1..N
};

/// Y = IN( mean over the top K blocks of IN(tap) ). `taps` are one
/// utterance's per-block FFN outputs from an unmasked eval-mode teacher pass.
template <class T>
TargetRepresentation<T> build_targets(const std::vector<Tensor<T>>& taps, std::size_t K) {
  const std::size_t N = taps.size();
  if (K < 1 || K > N) throw ConfigError("targets.top_k must lie in [1, " + std::to_string(N) + "]");
  const std::size_t U = taps[0].rows(), D = taps[0].cols();
  std::vector<double> acc(U * D, 0.0);
  TargetRepresentation<T> r;
  r.k_used = K;
  for (std::size_t k = 1; k <= K; ++k) {
    const auto& tap = taps[N - k];
    if (tap.shape() != taps[0].shape()) throw DimensionError("build_targets: tap shapes differ");
    auto normed = instance_norm<T>(tap.data(), U, D);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += double(normed[i]);
    r.source_blocks.push_back(N - k + 1);
  }
  std::reverse(r.source_blocks.begin(), r.source_blocks.end());
  for (auto& v : acc) v /= double(K);
  auto y = instance_norm<double>(std::span<const double>(acc), U, D);
  r.y = Tensor<T>::from({U, D}, std::vector<T>(y.begin(), y.end()));
  return r;
}

/// build_targets applied per segment of stacked taps [ΣU × D].
template <class T>
Tensor<T> build_targets(const std::vector<Tensor<T>>& taps, const Segments& seg, std::size_t K) {
  NoGradGuard no_grad;
  std::vector<Tensor<T>> parts;
  std::size_t off = 0;
  for (auto u : seg) {
    std::vector<Tensor<T>> local;
    for (const auto& t : taps) local.push_back(seg.size() == 1 ? t : slice(t, 0, off, off + u));
    parts.push_back(build_targets(local, K).y);
    off += u;
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0).detach();
}

}  // namespace avd2v
