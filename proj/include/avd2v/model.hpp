#pragma once

// The audio-visual encoder: front ends, additive fusion, masking and the
// shared transformer, wired over ragged batches.

#include <string>
#include <vector>

#include "avd2v/encoder.hpp"
#include "avd2v/frontends.hpp"
#include "avd2v/fusion.hpp"
#include "avd2v/synth.hpp"

namespace avd2v {

struct ModelConfig {
  FrontendConfig frontend;
  EncoderConfig encoder;
  double mask_prob_percent = 50.0;
  std::size_t mask_length = 10;
  double flip_prob = 0.5;

  void validate() const {
    encoder.validate();
    if (frontend.dim != encoder.dim) throw ConfigError("front-end dim must match model.dim");
    if (frontend.audio_stack == 0) throw ConfigError("model.audio_stack must be >= 1");
    if (mask_prob_percent < 0 || mask_prob_percent > 100) throw ConfigError("mask.prob must lie in [0, 100]");
    if (mask_length == 0) throw ConfigError("mask.length must be >= 1");
    if (flip_prob < 0 || flip_prob > 1) throw ConfigError("data.flip_prob must lie in [0, 1]");
  }
};

template <class T>
void init_model(ParamStore<T>& p, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  init_audio_frontend(p, cfg.frontend, rng);
  init_video_frontend(p, cfg.frontend, rng);
  p.add("mask_emb", init::normal<T>({cfg.encoder.dim}, rng, 0.02));
  init_encoder(p, cfg.encoder, rng);
}

/// Per-utterance model inputs: stacked, normalized audio [U×F'] and cropped
/// video clips [1×U×S×S]. Video may be left empty when unused.
template <class T>
struct ModelInputs {
  std::vector<Tensor<T>> audio;
  std::vector<Tensor<T>> video;
  Segments seg;
};

template <class T>
ModelInputs<T> prepare_inputs(const ModalityBatch& batch, const ModelConfig& cfg, bool training, Rng& rng,
                              bool with_video = true) {
  ModelInputs<T> in;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch.audio_rate != cfg.frontend.audio_stack)
      throw ConfigError("model.audio_stack (" + std::to_string(cfg.frontend.audio_stack) +
                        ") must equal the corpus audio rate factor (" + std::to_string(batch.audio_rate) + ")");
    auto a = normalize_audio(stack_audio(batch.audio_of(b), cfg.frontend.audio_stack));
    if (a.dims != cfg.frontend.audio_in_dim) throw DimensionError("audio feature width does not match model config");
    in.audio.push_back(Tensor<T>::from({a.frames, a.dims}, std::vector<T>(a.values.begin(), a.values.end())));
    if (with_video) {
      auto v = augment_video(batch.video_of(b), cfg.flip_prob, cfg.frontend.video_side, training, rng);
      in.video.push_back(
          Tensor<T>::from({1, v.frames, v.height, v.width}, std::vector<T>(v.values.begin(), v.values.end())));
    }
    in.seg.push_back(batch.lengths[b]);
  }
  return in;
}

template <class T>
struct FusedFeatures {
  Tensor<T> m;  // [ΣU × D]
  bool video_encoder_invoked = false;
};

/// Encodes the modalities each utterance needs and fuses them per selection.
template <class T>
FusedFeatures<T> fused_features(const ModelInputs<T>& in, const std::vector<Modality>& sel, ParamStore<T>& p,
                                const ModelConfig& cfg, bool training) {
  const std::size_t B = in.seg.size();
  if (sel.size() != B) throw ContractError("fused_features: one selection per utterance required");
  std::vector<std::size_t> with_a, with_v;
  for (std::size_t b = 0; b < B; ++b) {
    if (sel[b] != Modality::V) with_a.push_back(b);
    if (sel[b] != Modality::A) with_v.push_back(b);
  }
  FusedFeatures<T> out;
  Tensor<T> m_a, m_v;
  if (!with_a.empty()) {
    std::vector<Tensor<T>> rows;
    for (auto b : with_a) rows.push_back(in.audio.at(b));
    m_a = audio_encode(rows.size() == 1 ? rows[0] : concat(rows, 0), p);
  }
  if (!with_v.empty()) {
    if (in.video.size() != B) throw ContractError("fused_features: video inputs were not prepared");
    std::vector<Tensor<T>> clips;
    for (auto b : with_v) clips.push_back(in.video[b]);
    m_v = video_encode(clips, p, cfg.frontend, training);
    out.video_encoder_invoked = true;
  }
  if (with_v.empty()) {
    out.m = m_a;
    return out;
  }
  if (with_a.empty()) {
    out.m = m_v;
    return out;
  }
  if (with_a.size() == B && with_v.size() == B) {
    out.m = add(m_a, m_v);
    return out;
  }
  std::vector<Tensor<T>> parts;
  std::size_t oa = 0, ov = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t u = in.seg[b];
    Tensor<T> a, v;
    if (sel[b] != Modality::V) {
      a = slice(m_a, 0, oa, oa + u);
      oa += u;
    }
    if (sel[b] != Modality::A) {
      v = slice(m_v, 0, ov, ov + u);
      ov += u;
    }
    parts.push_back(fuse(a, v, sel[b]));
  }
  out.m = concat(parts, 0);
  return out;
}

/// Per-utterance masks lifted onto the stacked row index space.
inline MaskSet stack_masks(const std::vector<MaskSet>& masks, const Segments& seg) {
  MaskSet all;
  std::size_t off = 0;
  for (std::size_t b = 0; b < seg.size(); ++b) {
    for (auto i : masks[b].indices) all.indices.push_back(off + i);
    off += seg[b];
  }
  all.length = off;
  return all;
}

}  // namespace avd2v
