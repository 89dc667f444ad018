#pragma once

// Self-supervised objective and the pre-training step: an EMA teacher
// encodes the unmasked input into contextualized targets and the student
// regresses them from a masked view.

#include <array>
#include <chrono>
#include <string>
#include <vector>

#include "avd2v/model.hpp"
#include "avd2v/optim.hpp"
#include "avd2v/targets.hpp"

namespace avd2v {

struct LossWeights {
  double alpha = 1.0;  // masked timesteps
  double beta = 0.0;   // unmasked timesteps
};

/// Audio or audio-video input: masked steps only. Video-only input also
/// regresses the (audio) targets at unmasked steps.
inline LossWeights loss_weights_for(Modality sel) {
  return sel == Modality::V ? LossWeights{1.0, 1.0} : LossWeights{1.0, 0.0};
}

template <class T>
struct PretrainLoss {
  Tensor<T> loss;          // α·Σ_{t∈I}||z_t−y_t||² + β·Σ_{t∉I}||z_t−y_t||²
  std::size_t counted = 0;  // timesteps with non-zero weight
};

/// Masked-regression loss over stacked utterances. `masks[b]` indexes utterance b's rows;
/// rows at or beyond valid[b] (padding) carry zero weight.
template <class T>
PretrainLoss<T> pretrain_loss(const Tensor<T>& z, const Tensor<T>& y, const Segments& seg,
                              const std::vector<MaskSet>& masks, const std::vector<LossWeights>& weights,
                              const std::vector<std::size_t>& valid = {}) {
  detail::require_same_shape(z, y, "pretrain_loss");
  if (segments_total(seg) != z.rows()) throw DimensionError("pretrain_loss: segments do not cover z");
  if (masks.size() != seg.size() || weights.size() != seg.size())
    throw ContractError("pretrain_loss: one mask and one weight pair per utterance");
  std::vector<T> w(z.rows(), T(0));
  PretrainLoss<T> out;
  std::size_t off = 0;
  for (std::size_t b = 0; b < seg.size(); ++b) {
    const std::size_t u = seg[b];
    const std::size_t limit = valid.empty() ? u : std::min(valid[b], u);
    auto flags = masks[b].as_flags();
    flags.resize(u, false);
    for (auto i : masks[b].indices)
      if (i >= u) throw ContractError("pretrain_loss: mask index outside utterance");
    for (std::size_t t = 0; t < limit; ++t) {
      w[off + t] = T(flags[t] ? weights[b].alpha : weights[b].beta);
      if (w[off + t] != T(0)) ++out.counted;
    }
    off += u;
  }
  auto diff = sub(z, y);
  out.loss = sum(scale_rows(mul(diff, diff), std::move(w)));
  return out;
}

/// Single-utterance form.
template <class T>
Tensor<T> pretrain_loss(const Tensor<T>& z, const Tensor<T>& y, const MaskSet& mask, const LossWeights& w) {
  return pretrain_loss(z, y, Segments{z.rows()}, {mask}, {w}).loss;
}

struct PretrainConfig {
  ModelConfig model;
  ModalityScheduleConfig student = ModalityScheduleConfig::student_default();
  ModalityScheduleConfig teacher = ModalityScheduleConfig::audio_only();
  EmaSchedule ema;
  std::size_t top_k = 12;
  AdamConfig adam;
  double lr = 5e-4;
  double warmup_fraction = 0.03;
  std::size_t updates = 1000;
  bool audio_only = false;  // visual features never reach the transformer

  void validate() const {
    model.validate();
    student.validate("student");
    teacher.validate("teacher");
    ema.validate();
    if (top_k < 1 || top_k > model.encoder.n_blocks)
      throw ConfigError("targets.top_k must lie in [1, model.n_blocks]");
    if (lr <= 0) throw ConfigError("optim.lr must be positive");
    if (warmup_fraction < 0 || warmup_fraction > 1) throw ConfigError("pretrain.warmup_fraction must lie in [0, 1]");
  }

  std::size_t warmup_updates() const { return static_cast<std::size_t>(std::llround(warmup_fraction * double(updates))); }
};

/// Everything a run needs to resume bit-exactly.
template <class T>
struct ModelState {
  ParamStore<T> student;
  ParamStore<T> teacher;  // empty outside pre-training
  AdamState<T> adam;
  std::uint64_t step = 0;
  Rng rng;
};

/// Fresh student from `seed`; the teacher starts as an exact copy.
template <class T>
ModelState<T> init_pretrain_state(const PretrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState<T> s;
  Rng init_rng(derive_seed(seed, 0x1A17ULL));
  init_model(s.student, cfg.model, init_rng);
  s.teacher = s.student.clone();
  for (auto& e : s.teacher.entries()) e.value.set_requires_grad(false);
  s.adam = AdamState<T>::for_params(s.student);
  s.rng = Rng(derive_seed(seed, 0x57E9ULL));
  return s;
}

struct PretrainMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;      // sum form divided by counted timesteps
  double loss_sum = 0.0;
  double lr = 0.0;
  double tau = 0.0;
  double grad_norm = 0.0;
  std::array<std::size_t, 3> student_modality{0, 0, 0};  // av, a, v
  std::array<std::size_t, 3> teacher_modality{0, 0, 0};
  std::size_t counted = 0;
  std::size_t teacher_mask_size = 0;
  bool video_encoder_invoked = false;
  double wall_ms = 0.0;
};

/// Teacher pass on the unmasked input: stacked targets [ΣU × D].
template <class T>
Tensor<T> teacher_targets(ParamStore<T>& teacher, const ModelInputs<T>& in, const std::vector<Modality>& sel,
                          const PretrainConfig& cfg, bool* video_used = nullptr) {
  NoGradGuard no_grad;
  auto fused = fused_features(in, sel, teacher, cfg.model, false);
  if (video_used) *video_used = *video_used || fused.video_encoder_invoked;
  ForwardMode eval;
  auto out = encode(fused.m, in.seg, teacher, cfg.model.encoder, true, eval);
  return build_targets(out.taps, in.seg, cfg.top_k);
}

/// One pre-training update: targets, masked student pass, regression loss,
/// backward, optimizer step, EMA teacher update.
template <class T>
PretrainMetrics pretrain_step(const ModalityBatch& batch, ModelState<T>& state, const PretrainConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  PretrainMetrics m;
  m.step = state.step;
  m.lr = warmup_linear_lr(state.step, cfg.warmup_updates(), cfg.updates, cfg.lr);
  m.tau = tau_at(cfg.ema, state.step);

  const std::size_t B = batch.size();
  auto in = prepare_inputs<T>(batch, cfg.model, true, state.rng, !cfg.audio_only);

  std::vector<Modality> teacher_sel(B, Modality::A), student_sel(B, Modality::A);
  if (!cfg.audio_only) {
    const auto tp = cfg.teacher.at(state.step);
    const auto sp = cfg.student.at(state.step);
    for (auto& s : teacher_sel) s = select_modality(state.rng, tp);
    for (auto& s : student_sel) s = select_modality(state.rng, sp);
  }
  for (std::size_t b = 0; b < B; ++b) {
    ++m.teacher_modality[std::size_t(teacher_sel[b])];
    ++m.student_modality[std::size_t(student_sel[b])];
  }

  // Targets come from the unmasked input; the teacher never sees a mask.
  const auto y = teacher_targets(state.teacher, in, teacher_sel, cfg, &m.video_encoder_invoked);
  m.teacher_mask_size = 0;

  state.student.zero_grad();
  auto fused = fused_features(in, student_sel, state.student, cfg.model, true);
  m.video_encoder_invoked = m.video_encoder_invoked || fused.video_encoder_invoked;
  std::vector<MaskSet> masks;
  for (auto u : in.seg) masks.push_back(sample_mask(u, cfg.model.mask_prob_percent, cfg.model.mask_length, state.rng));
  auto masked = apply_mask(fused.m, stack_masks(masks, in.seg), state.student["mask_emb"]);
  ForwardMode train{true, &state.rng};
  auto z = encode(masked, in.seg, state.student, cfg.model.encoder, false, train).z;

  std::vector<LossWeights> weights;
  for (auto s : student_sel) weights.push_back(loss_weights_for(s));
  auto loss = pretrain_loss(z, y, in.seg, masks, weights);
  m.loss_sum = double(loss.loss.item());
  m.counted = loss.counted;
  m.loss = loss.counted ? m.loss_sum / double(loss.counted) : 0.0;
  if (!std::isfinite(m.loss_sum))
    throw NumericError("pretrain_step " + std::to_string(state.step) + ": non-finite loss (first utterance " +
                       batch.utt_ids.front() + ")");

  backward(loss.loss);
  const auto rep = adam_step(state.student, state.adam, m.lr, cfg.adam);
  state.student.zero_grad();
  if (!rep.applied)
    throw NumericError("pretrain_step " + std::to_string(state.step) + ": non-finite gradients, step rejected");
  m.grad_norm = rep.grad_norm;

  ema_update(state.teacher, state.student, m.tau);
  ++state.step;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return m;
}

}  // namespace avd2v
