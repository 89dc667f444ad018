#pragma once

// Adaptive-moment optimizer with decoupled weight decay, global-norm
// clipping, and the learning-rate schedules used for pre-training and
// fine-tuning.

#include <cmath>
#include <numbers>
#include <vector>

#include "avd2v/params.hpp"

namespace avd2v {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

/// First and second moments aligned with a ParamStore's entry order.
template <class T>
struct AdamState {
  std::vector<std::string> names;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;

  static AdamState for_params(const ParamStore<T>& p) {
    AdamState s;
    for (const auto& e : p.entries()) {
      s.names.push_back(e.name);
      s.m.emplace_back(e.trainable ? e.value.numel() : 0, T(0));
      s.v.emplace_back(e.trainable ? e.value.numel() : 0, T(0));
    }
    return s;
  }
};

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
  double clip_scale = 1.0;
};

template <class T>
double global_grad_norm(const ParamStore<T>& p) {
  double s = 0;
  for (const auto& e : p.entries())
    if (e.trainable && e.value.has_grad())
      for (T g : e.value.grad()) s += double(g) * double(g);
  return std::sqrt(s);
}

/// One bias-corrected update of every trainable entry that received a
/// gradient. Entries without a gradient are left untouched, moments
/// included. Non-finite gradients reject the whole step.
template <class T>
StepReport adam_step(ParamStore<T>& p, AdamState<T>& s, double lr, const AdamConfig& cfg) {
  StepReport r;
  if (s.names.size() != p.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  r.grad_norm = global_grad_norm(p);
  if (!std::isfinite(r.grad_norm)) return r;
  if (cfg.clip_norm > 0 && r.grad_norm > cfg.clip_norm) r.clip_scale = cfg.clip_norm / r.grad_norm;
  s.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(s.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(s.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& e = p.entries()[i];
    if (!e.trainable || !e.value.has_grad()) continue;
    if (s.names[i] != e.name) throw ContractError("adam_step: optimizer state order mismatch at '" + e.name + "'");
    auto w = e.value.mutable_data();
    auto g = e.value.grad();
    auto& m = s.m[i];
    auto& v = s.v[i];
    const bool decay = e.value.rank() >= 2 && cfg.weight_decay > 0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = double(g[j]) * r.clip_scale;
      m[j] = T(cfg.beta1 * double(m[j]) + (1.0 - cfg.beta1) * gj);
      v[j] = T(cfg.beta2 * double(v[j]) + (1.0 - cfg.beta2) * gj * gj);
      const double mhat = double(m[j]) / bc1;
      const double vhat = double(v[j]) / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg.eps);
      if (decay) upd += cfg.weight_decay * double(w[j]);
      w[j] = T(double(w[j]) - lr * upd);
    }
  }
  r.applied = true;
  return r;
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

/// Linear warmup from init_scale·peak to peak over `warmup` steps, hold at
/// peak for `hold` steps, then exponential decay reaching final_scale·peak at
/// `total`; constant afterwards.
inline double tri_stage_lr(std::size_t step, std::size_t warmup, std::size_t hold, std::size_t total, double peak,
                           double init_scale, double final_scale) {
  if (warmup + hold > total) throw ConfigError("tri-stage schedule: warmup + hold exceeds total updates");
  if (step < warmup) {
    const double init = init_scale * peak;
    return init + (peak - init) * double(step) / double(warmup);
  }
  if (step < warmup + hold) return peak;
  const std::size_t decay_steps = total - warmup - hold;
  if (decay_steps == 0) return final_scale * peak;
  const double into = double(std::min(step, total) - warmup - hold);
  const double rate = -std::log(final_scale) / double(decay_steps);
  return peak * std::exp(-rate * into);
}

/// Linear warmup from 0 to peak, then half-cosine decay to 0 at `total`.
inline double cosine_lr(std::size_t step, std::size_t warmup, std::size_t total, double peak) {
  if (warmup > total) throw ConfigError("cosine schedule: warmup exceeds total updates");
  if (step < warmup) return peak * double(step) / double(warmup);
  if (step >= total) return 0.0;
  const double progress = double(step - warmup) / double(total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Pre-training schedule: linear warmup to peak, then linear decay to 0.
inline double warmup_linear_lr(std::size_t step, std::size_t warmup, std::size_t total, double peak) {
  if (warmup > total) throw ConfigError("pretrain schedule: warmup exceeds total updates");
  if (step < warmup) return peak * double(step + 1) / double(warmup);
  if (step >= total) return 0.0;
  return peak * double(total - step) / double(total - warmup);
}

}  // namespace avd2v
