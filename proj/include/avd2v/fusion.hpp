#pragma once

// Modality scheduling, additive audio-visual fusion and span masking.

#include <algorithm>
#include <array>
#include <set>
#include <string>
#include <vector>

#include "avd2v/tensor.hpp"

namespace avd2v {

/// A probability linearly annealed from `start` to `end` over `anneal_steps`.
struct ScheduledProb {
  double start = 0.0;
  double end = 0.0;
  std::size_t anneal_steps = 0;

  void validate(const std::string& what) const {
    if (start < 0.0 || start > 1.0 || end < 0.0 || end > 1.0)
      throw ConfigError(what + ": probabilities must lie in [0, 1]");
  }
};

inline double anneal_value(const ScheduledProb& s, std::size_t step) {
  if (s.anneal_steps == 0) return s.start;
  const double frac = std::min(double(step) / double(s.anneal_steps), 1.0);
  if (frac >= 1.0) return s.end;
  return s.start + (s.end - s.start) * frac;
}

enum class Modality { AV = 0, A = 1, V = 2 };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::AV: return "av";
    case Modality::A: return "a";
    case Modality::V: return "v";
  }
  return "?";
}

struct ModalityProbs {
  double av = 1.0;
  double a = 0.0;
  double v = 0.0;
};

/// p_A and p_V from the probability of audio-video and the conditionals
/// given audio-video was not selected.
inline ModalityProbs effective_probs(double p_av, double p_v_cond, double p_a_cond) {
  for (double p : {p_av, p_v_cond, p_a_cond})
    if (p < 0.0 || p > 1.0) throw ConfigError("effective_probs: probabilities must lie in [0, 1]");
  if (std::abs(p_v_cond + p_a_cond - 1.0) > 1e-9)
    throw ConfigError("effective_probs: p(V|not AV) + p(A|not AV) must equal 1");
  const double v = (1.0 - p_av) * p_v_cond;
  // p_A takes the rounding residue so that (av + v) + a == 1 in floating point.
  return {p_av, 1.0 - (p_av + v), v};
}

struct ModalityScheduleConfig {
  ScheduledProb p_av{1.0, 1.0, 0};
  ScheduledProb p_v_cond{1.0, 1.0, 0};
  ScheduledProb p_a_cond{0.0, 0.0, 0};

  static ModalityScheduleConfig student_default() {
    return {{1.0, 0.25, 150000}, {1.0, 1.0, 150000}, {0.0, 0.0, 150000}};
  }
  static ModalityScheduleConfig audio_only() { return {{0.0, 0.0, 0}, {0.0, 0.0, 0}, {1.0, 1.0, 0}}; }
  static ModalityScheduleConfig fixed(double p_av, double p_a, double p_v) {
    if (std::abs(p_av + p_a + p_v - 1.0) > 1e-12) throw ConfigError("fixed modality probabilities must sum to 1");
    const double rest = 1.0 - p_av;
    const double a_cond = rest > 0 ? p_a / rest : 0.5;
    return {{p_av, p_av, 0}, {1.0 - a_cond, 1.0 - a_cond, 0}, {a_cond, a_cond, 0}};
  }

  void validate(const std::string& role) const {
    p_av.validate(role + ".p_av");
    p_v_cond.validate(role + ".p_v_cond");
    p_a_cond.validate(role + ".p_a_cond");
    if (std::abs(p_v_cond.start + p_a_cond.start - 1.0) > 1e-9 || std::abs(p_v_cond.end + p_a_cond.end - 1.0) > 1e-9)
      throw ConfigError(role + ": p_v_cond + p_a_cond must equal 1 at both endpoints");
    if (p_v_cond.anneal_steps != p_a_cond.anneal_steps)
      throw ConfigError(role + ": conditional schedules must share anneal steps");
  }

  ModalityProbs at(std::size_t step) const {
    const double v = anneal_value(p_v_cond, step);
    // Derive one conditional from the other so they sum to 1 at every step.
    return effective_probs(anneal_value(p_av, step), v, 1.0 - v);
  }
};

inline Modality select_modality(Rng& rng, const ModalityProbs& p) {
  const double u = rng.uniform();
  if (u < p.av) return Modality::AV;
  if (u < p.av + p.a) return Modality::A;
  return p.v > 0.0 ? Modality::V : (p.a > 0.0 ? Modality::A : Modality::AV);
}

/// M = M_A + M_V, M_A, or M_V depending on the selection. An absent
/// modality may be passed as an undefined tensor.
template <class T>
Tensor<T> fuse(const Tensor<T>& m_a, const Tensor<T>& m_v, Modality sel) {
  switch (sel) {
    case Modality::AV:
      if (!m_a.defined() || !m_v.defined()) throw ContractError("fuse: AV needs both modalities");
      return add(m_a, m_v);
    case Modality::A:
      if (!m_a.defined()) throw ContractError("fuse: A needs audio features");
      if (m_v.defined()) detail::require_same_shape(m_a, m_v, "fuse");
      return m_a;
    case Modality::V:
      if (!m_v.defined()) throw ContractError("fuse: V needs video features");
      if (m_a.defined()) detail::require_same_shape(m_a, m_v, "fuse");
      return m_v;
  }
  throw ContractError("fuse: bad modality");
}

struct MaskSet {
  std::size_t length = 0;  // U
  std::vector<std::size_t> indices;  // sorted, unique

  bool contains(std::size_t t) const { return std::binary_search(indices.begin(), indices.end(), t); }
  std::size_t size() const { return indices.size(); }
  std::vector<bool> as_flags() const {
    std::vector<bool> f(length, false);
    for (auto i : indices) f[i] = true;
    return f;
  }
};

/// Each timestep starts a span with probability r/100; span [t, min(t+l, U)).
inline MaskSet sample_mask(std::size_t U, double r_percent, std::size_t l, Rng& rng) {
  if (U == 0) throw ContractError("sample_mask: U must be >= 1");
  if (l == 0) throw ContractError("sample_mask: span length must be >= 1");
  const double p = r_percent / 100.0;
  std::vector<bool> flag(U, false);
  for (std::size_t t = 0; t < U; ++t)
    if (rng.uniform() < p)
      for (std::size_t k = t; k < std::min(t + l, U); ++k) flag[k] = true;
  MaskSet m;
  m.length = U;
  for (std::size_t t = 0; t < U; ++t)
    if (flag[t]) m.indices.push_back(t);
  return m;
}

/// Replaces masked rows with `mask_embedding` (a learned D-vector).
template <class T>
Tensor<T> apply_mask(const Tensor<T>& m, const MaskSet& mask, const Tensor<T>& mask_embedding) {
  detail::require_rank(m, 2, "apply_mask");
  const std::size_t U = m.rows(), D = m.cols();
  if (mask_embedding.numel() != D) throw DimensionError("apply_mask: embedding width mismatch");
  for (auto i : mask.indices)
    if (i >= U) throw ContractError("apply_mask: index " + std::to_string(i) + " >= U");
  if (mask.indices.empty()) return m;
  auto flags = mask.as_flags();
  flags.resize(U, false);
  std::vector<T> out(m.data().begin(), m.data().end());
  auto e = mask_embedding.data();
  for (std::size_t t = 0; t < U; ++t)
    if (flags[t]) std::copy(e.begin(), e.end(), out.begin() + t * D);
  auto pm = m.node(), pe = mask_embedding.node();
  return detail::make_result<T>(m.shape(), std::move(out), {m, mask_embedding},
                                [pm, pe, U, D, flags = std::move(flags)](Node<T>& self) {
                                  T* gm = pm->requires_grad ? pm->grad_buffer() : nullptr;
                                  T* ge = pe->requires_grad ? pe->grad_buffer() : nullptr;
                                  for (std::size_t t = 0; t < U; ++t)
                                    for (std::size_t d = 0; d < D; ++d) {
                                      const T g = self.grad[t * D + d];
                                      if (flags[t]) {
                                        if (ge) ge[d] += g;
                                      } else if (gm) {
                                        gm[t * D + d] += g;
                                      }
                                    }
                                },
                                "apply_mask");
}

}  // namespace avd2v
