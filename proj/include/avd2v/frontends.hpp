#pragma once

// Audio and video front ends: raw per-modality frames to U×D feature
// sequences at the shared 25 fps rate.

#include <array>
#include <string>
#include <vector>

#include "avd2v/conv.hpp"
#include "avd2v/params.hpp"

namespace avd2v {

/// U'×F log-filterbank style features.
template <class T>
struct AudioFrames {
  std::size_t frames = 0;
  std::size_t dims = 0;
  std::vector<T> values;  // row-major frames × dims
  double frame_rate = 100.0;

  T at(std::size_t t, std::size_t d) const { return values[t * dims + d]; }
};

/// U×C×H×W grayscale frames (C is always 1 here).
template <class T>
struct VideoFrames {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;  // frames × height × width
  double frame_rate = 25.0;
};

struct FrontendConfig {
  std::size_t dim = 768;
  std::size_t audio_in_dim = 104;  // F · audio_stack
  std::size_t audio_stack = 4;
  std::vector<std::size_t> video_channels{8, 16, 32, 64};
  std::size_t video_blocks_per_stage = 2;
  std::array<std::size_t, 3> stem_kernel{5, 7, 7};
  std::size_t video_side = 88;
};

/// Concatenates groups of `factor` consecutive frames; a trailing partial
/// group is zero-padded to full width.
template <class T>
AudioFrames<T> stack_audio(const AudioFrames<T>& x, std::size_t factor) {
  if (factor == 0) throw ConfigError("stack_audio: factor must be >= 1");
  AudioFrames<T> out;
  out.frames = (x.frames + factor - 1) / factor;
  out.dims = x.dims * factor;
  out.frame_rate = x.frame_rate / double(factor);
  out.values.assign(out.frames * out.dims, T(0));
  for (std::size_t t = 0; t < x.frames; ++t) {
    const std::size_t g = t / factor, slot = t % factor;
    std::copy_n(x.values.begin() + t * x.dims, x.dims, out.values.begin() + g * out.dims + slot * x.dims);
  }
  return out;
}

/// Standardizes each feature dimension over the utterance's frames.
template <class T>
AudioFrames<T> normalize_audio(const AudioFrames<T>& x, double eps = 1e-5) {
  if (x.frames == 0) throw DimensionError("normalize_audio: no frames");
  AudioFrames<T> out = x;
  for (std::size_t d = 0; d < x.dims; ++d) {
    double mean = 0;
    for (std::size_t t = 0; t < x.frames; ++t) mean += double(x.at(t, d));
    mean /= double(x.frames);
    double var = 0;
    for (std::size_t t = 0; t < x.frames; ++t) var += (double(x.at(t, d)) - mean) * (double(x.at(t, d)) - mean);
    var /= double(x.frames);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t t = 0; t < x.frames; ++t) out.values[t * x.dims + d] = T((double(x.at(t, d)) - mean) * inv);
  }
  return out;
}

template <class T>
Tensor<T> to_tensor(const AudioFrames<T>& x) {
  return Tensor<T>::from({x.frames, x.dims}, x.values);
}

/// Video as a [1×U×H×W] tensor.
template <class T>
Tensor<T> to_tensor(const VideoFrames<T>& x) {
  return Tensor<T>::from({1, x.frames, x.height, x.width}, x.values);
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

template <class T>
void add_bn(ParamStore<T>& p, const std::string& prefix, std::size_t channels) {
  p.add(prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
  p.add(prefix + ".beta", Tensor<T>::zeros({channels}));
  p.add(prefix + ".running_mean", Tensor<T>::zeros({channels}), false);
  p.add(prefix + ".running_var", Tensor<T>::full({channels}, T(1)), false);
}

inline std::string block_prefix(std::size_t stage, std::size_t block) {
  return "video.s" + std::to_string(stage) + ".b" + std::to_string(block);
}

inline std::size_t block_stride(std::size_t stage, std::size_t block) { return (stage > 0 && block == 0) ? 2 : 1; }

}  // namespace detail

template <class T>
void init_audio_frontend(ParamStore<T>& p, const FrontendConfig& cfg, Rng& rng) {
  const double std = 1.0 / std::sqrt(double(cfg.audio_in_dim));
  p.add("audio.weight", init::normal<T>({cfg.audio_in_dim, cfg.dim}, rng, std));
  p.add("audio.bias", Tensor<T>::zeros({cfg.dim}));
}

template <class T>
void init_video_frontend(ParamStore<T>& p, const FrontendConfig& cfg, Rng& rng) {
  if (cfg.video_channels.empty()) throw ConfigError("video_channels must list at least one stage");
  const std::size_t c0 = cfg.video_channels[0];
  const auto& k = cfg.stem_kernel;
  p.add("video.stem.weight", init::kaiming<T>({c0, 1, k[0], k[1], k[2]}, rng));
  detail::add_bn(p, "video.stem.bn", c0);
  p.add("video.stem.prelu", Tensor<T>::full({c0}, T(0.25)));
  std::size_t in = c0;
  for (std::size_t s = 0; s < cfg.video_channels.size(); ++s) {
    const std::size_t out = cfg.video_channels[s];
    for (std::size_t b = 0; b < cfg.video_blocks_per_stage; ++b) {
      const auto pre = detail::block_prefix(s, b);
      p.add(pre + ".conv1.weight", init::kaiming<T>({out, in, 1, 3, 3}, rng));
      detail::add_bn(p, pre + ".bn1", out);
      p.add(pre + ".conv2.weight", init::kaiming<T>({out, out, 1, 3, 3}, rng));
      detail::add_bn(p, pre + ".bn2", out);
      if (detail::block_stride(s, b) != 1 || in != out) {
        p.add(pre + ".down.weight", init::kaiming<T>({out, in, 1, 1, 1}, rng));
        detail::add_bn(p, pre + ".down.bn", out);
      }
      in = out;
    }
  }
  const double std = 1.0 / std::sqrt(double(in));
  p.add("video.proj.weight", init::normal<T>({in, cfg.dim}, rng, std));
  p.add("video.proj.bias", Tensor<T>::zeros({cfg.dim}));
}

// ---------------------------------------------------------------------------
// Forward

/// M_A = A(X_A): one affine map per stacked audio frame.
template <class T>
Tensor<T> audio_encode(const Tensor<T>& x, const ParamStore<T>& p) {
  const auto& w = p["audio.weight"];
  if (x.rank() != 2 || x.cols() != w.rows())
    throw DimensionError("audio_encode: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  return linear(x, w, p["audio.bias"]);
}

namespace detail {

template <class T>
Tensor<T> bn(const Tensor<T>& x, ParamStore<T>& p, const std::string& pre, bool training) {
  return batch_norm(x, p[pre + ".gamma"], p[pre + ".beta"], p[pre + ".running_mean"], p[pre + ".running_var"],
                    training);
}

}  // namespace detail

/// Video clips [1×U_i×H×W] → per-frame features [ΣU_i × D], rows in clip
/// order. The 3D stem runs per clip so its temporal window never straddles
/// two utterances; everything after it is per frame.
template <class T>
Tensor<T> video_encode(const std::vector<Tensor<T>>& clips, ParamStore<T>& p, const FrontendConfig& cfg,
                       bool training) {
  if (clips.empty()) throw ContractError("video_encode: no clips");
  const auto& k = cfg.stem_kernel;
  const Dims3 stem_stride{1, 2, 2};
  const Dims3 stem_pad{k[0] / 2, k[1] / 2, k[2] / 2};
  std::vector<Tensor<T>> stems;
  for (const auto& c : clips) {
    if (c.rank() != 4 || c.dim(0) != 1) throw DimensionError("video_encode: expected [1×U×H×W], got " + shape_str(c.shape()));
    if (c.dim(2) < k[1] || c.dim(3) < k[2])
      throw DimensionError("video_encode: frames " + std::to_string(c.dim(2)) + "x" + std::to_string(c.dim(3)) +
                           " smaller than the stem kernel");
    stems.push_back(conv3d(c, p["video.stem.weight"], Tensor<T>(), stem_stride, stem_pad));
  }
  auto x = stems.size() == 1 ? stems[0] : concat(stems, 1);
  x = detail::bn(x, p, "video.stem.bn", training);
  x = prelu(x, p["video.stem.prelu"]);
  x = max_pool3d(x, {1, 3, 3}, {1, 2, 2}, {0, 1, 1});
  for (std::size_t s = 0; s < cfg.video_channels.size(); ++s)
    for (std::size_t b = 0; b < cfg.video_blocks_per_stage; ++b) {
      const auto pre = detail::block_prefix(s, b);
      const std::size_t st = detail::block_stride(s, b);
      auto h = conv3d(x, p[pre + ".conv1.weight"], Tensor<T>(), {1, st, st}, {0, 1, 1});
      h = relu(detail::bn(h, p, pre + ".bn1", training));
      h = conv3d(h, p[pre + ".conv2.weight"], Tensor<T>(), {1, 1, 1}, {0, 1, 1});
      h = detail::bn(h, p, pre + ".bn2", training);
      Tensor<T> shortcut = x;
      if (p.contains(pre + ".down.weight")) {
        shortcut = conv3d(x, p[pre + ".down.weight"], Tensor<T>(), {1, st, st}, {0, 0, 0});
        shortcut = detail::bn(shortcut, p, pre + ".down.bn", training);
      }
      x = relu(add(h, shortcut));
    }
  auto pooled = spatial_avg_pool(x);
  return linear(pooled, p["video.proj.weight"], p["video.proj.bias"]);
}

template <class T>
Tensor<T> video_encode(const Tensor<T>& clip, ParamStore<T>& p, const FrontendConfig& cfg, bool training) {
  return video_encode(std::vector<Tensor<T>>{clip}, p, cfg, training);
}

}  // namespace avd2v
