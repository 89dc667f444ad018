#pragma once

// Pre-norm transformer blocks shared by the encoder and the decoder.
//
// Batches are ragged: activations of all utterances are stacked row-wise
// into one [ΣU × D] matrix and `segments` lists each utterance's row count.
// Position-wise layers run on the whole stack; attention runs per segment.

#include <cmath>
#include <string>
#include <vector>

#include "avd2v/params.hpp"

namespace avd2v {

using Segments = std::vector<std::size_t>;

inline std::size_t segments_total(const Segments& s) {
  std::size_t n = 0;
  for (auto v : s) n += v;
  return n;
}

struct EncoderConfig {
  std::size_t n_blocks = 12;
  std::size_t dim = 768;
  std::size_t ffn_dim = 3072;
  std::size_t n_heads = 12;
  double dropout = 0.1;
  std::size_t max_positions = 1024;

  static EncoderConfig base() { return {12, 768, 3072, 12, 0.1, 1024}; }
  static EncoderConfig large() { return {24, 1024, 4096, 16, 0.1, 1024}; }

  void validate() const {
    if (n_blocks < 1) throw ConfigError("encoder needs at least one block");
    if (n_heads == 0 || dim % n_heads != 0) throw ConfigError("model.dim must be divisible by model.n_heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
  }
};

template <class T>
struct EncoderOutput {
  Tensor<T> z;                 // [ΣU × D] after the final layer norm
  std::vector<Tensor<T>> taps;  // per block: FFN output before its residual add
};

/// Train/eval switch plus the dropout stream.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;

  template <class T>
  Tensor<T> drop(const Tensor<T>& x, double p) const {
    if (!training || p == 0.0) return x;
    if (!rng) throw ContractError("training-mode forward needs an RNG");
    return dropout(x, p, true, *rng);
  }
};

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

template <class T>
void add_ln(ParamStore<T>& p, const std::string& pre, std::size_t d) {
  p.add(pre + ".gamma", Tensor<T>::full({d}, T(1)));
  p.add(pre + ".beta", Tensor<T>::zeros({d}));
}

template <class T>
void add_linear(ParamStore<T>& p, const std::string& pre, std::size_t in, std::size_t out, Rng& rng) {
  p.add(pre + ".weight", init::normal<T>({in, out}, rng, 1.0 / std::sqrt(double(in))));
  p.add(pre + ".bias", Tensor<T>::zeros({out}));
}

template <class T>
Tensor<T> apply_linear(const Tensor<T>& x, const ParamStore<T>& p, const std::string& pre) {
  return linear(x, p[pre + ".weight"], p[pre + ".bias"]);
}

template <class T>
Tensor<T> apply_ln(const Tensor<T>& x, const ParamStore<T>& p, const std::string& pre) {
  return layer_norm(x, p[pre + ".gamma"], p[pre + ".beta"]);
}

}  // namespace detail

inline std::string encoder_block_prefix(std::size_t i) { return "enc.b" + std::to_string(i); }

template <class T>
void init_encoder_block(ParamStore<T>& p, const std::string& pre, const EncoderConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.dim;
  detail::add_ln(p, pre + ".ln1", d);
  detail::add_linear(p, pre + ".attn.qkv", d, 3 * d, rng);
  detail::add_linear(p, pre + ".attn.out", d, d, rng);
  detail::add_ln(p, pre + ".ln2", d);
  detail::add_linear(p, pre + ".ffn.fc1", d, cfg.ffn_dim, rng);
  detail::add_linear(p, pre + ".ffn.fc2", cfg.ffn_dim, d, rng);
}

template <class T>
void init_encoder(ParamStore<T>& p, const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  p.add("enc.pos", init::sinusoidal<T>(cfg.max_positions, cfg.dim));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) init_encoder_block(p, encoder_block_prefix(i), cfg, rng);
  detail::add_ln(p, "enc.ln_final", cfg.dim);
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention per segment and head. q is [ΣUq × D]; k and
/// v are [ΣUk × D]; segment i of q attends only to segment i of k/v.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Segments& seg_q,
                 const Segments& seg_k, std::size_t n_heads, bool causal) {
  if (seg_q.size() != seg_k.size()) throw DimensionError("attend: segment count mismatch");
  if (segments_total(seg_q) != q.rows() || segments_total(seg_k) != k.rows())
    throw DimensionError("attend: segments do not cover the inputs");
  const std::size_t d = q.cols();
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  std::vector<Tensor<T>> outs;
  std::size_t oq = 0, ok = 0;
  for (std::size_t s = 0; s < seg_q.size(); ++s) {
    auto qs = seg_q.size() == 1 ? q : slice(q, 0, oq, oq + seg_q[s]);
    auto ks = seg_k.size() == 1 ? k : slice(k, 0, ok, ok + seg_k[s]);
    auto vs = seg_k.size() == 1 ? v : slice(v, 0, ok, ok + seg_k[s]);
    std::vector<Tensor<T>> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto qh = n_heads == 1 ? qs : slice(qs, 1, h * dh, (h + 1) * dh);
      auto kh = n_heads == 1 ? ks : slice(ks, 1, h * dh, (h + 1) * dh);
      auto vh = n_heads == 1 ? vs : slice(vs, 1, h * dh, (h + 1) * dh);
      auto scores = scale(matmul(qh, kh, false, true), inv_sqrt);
      if (causal) scores = causal_mask(scores);
      heads.push_back(matmul(softmax(scores, 1), vh));
    }
    outs.push_back(heads.size() == 1 ? heads[0] : concat(heads, 1));
    oq += seg_q[s];
    ok += seg_k[s];
  }
  return outs.size() == 1 ? outs[0] : concat(outs, 0);
}

/// Attention probabilities for one segment and head (for inspection only).
template <class T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t n_heads, std::size_t head) {
  const std::size_t dh = q.cols() / n_heads;
  auto qh = slice(q, 1, head * dh, (head + 1) * dh);
  auto kh = slice(k, 1, head * dh, (head + 1) * dh);
  return softmax(scale(matmul(qh, kh, false, true), T(1) / std::sqrt(T(dh))), 1);
}

template <class T>
Tensor<T> self_attention(const Tensor<T>& x, const ParamStore<T>& p, const std::string& pre, const Segments& seg,
                         std::size_t n_heads, bool causal) {
  const std::size_t d = x.cols();
  auto qkv = detail::apply_linear(x, p, pre + ".qkv");
  auto q = slice(qkv, 1, 0, d);
  auto k = slice(qkv, 1, d, 2 * d);
  auto v = slice(qkv, 1, 2 * d, 3 * d);
  return detail::apply_linear(attend(q, k, v, seg, seg, n_heads, causal), p, pre + ".out");
}

// ---------------------------------------------------------------------------
// Blocks

template <class T>
struct BlockOutput {
  Tensor<T> y;
  Tensor<T> ffn_tap;
  Tensor<T> after_attention;  // x' = x + Attn(LN(x))
};

/// y = x' + FFN(LN(x')), x' = x + Attn(LN(x)). The tap is the exact addend
/// of the last residual connection.
template <class T>
BlockOutput<T> block_forward(const Tensor<T>& x, const ParamStore<T>& p, const std::string& pre, const Segments& seg,
                             const EncoderConfig& cfg, const ForwardMode& mode) {
  if (x.rank() != 2 || x.cols() != cfg.dim) throw DimensionError("block_forward: input " + shape_str(x.shape()));
  auto attn = self_attention(detail::apply_ln(x, p, pre + ".ln1"), p, pre + ".attn", seg, cfg.n_heads, false);
  auto x1 = add(x, mode.drop(attn, cfg.dropout));
  auto h = gelu(detail::apply_linear(detail::apply_ln(x1, p, pre + ".ln2"), p, pre + ".ffn.fc1"));
  auto tap = mode.drop(detail::apply_linear(h, p, pre + ".ffn.fc2"), cfg.dropout);
  return {add(x1, tap), tap, x1};
}

/// Adds learned absolute positions (restarting at 0 for every segment).
template <class T>
Tensor<T> add_positions(const Tensor<T>& x, const Tensor<T>& table, const Segments& seg) {
  std::vector<std::size_t> ids;
  ids.reserve(x.rows());
  for (auto u : seg) {
    if (u > table.rows())
      throw DimensionError("sequence of " + std::to_string(u) + " frames exceeds max_positions " +
                           std::to_string(table.rows()));
    for (std::size_t t = 0; t < u; ++t) ids.push_back(t);
  }
  return add(x, embedding(table, ids));
}

/// Z = T(M̃). Taps are only collected when asked for.
template <class T>
EncoderOutput<T> encode(const Tensor<T>& m_tilde, const Segments& seg, const ParamStore<T>& p,
                        const EncoderConfig& cfg, bool capture_taps, const ForwardMode& mode) {
  if (m_tilde.rank() != 2 || m_tilde.cols() != cfg.dim)
    throw DimensionError("encode: expected [U×" + std::to_string(cfg.dim) + "], got " + shape_str(m_tilde.shape()));
  if (segments_total(seg) != m_tilde.rows()) throw DimensionError("encode: segments do not cover the input");
  EncoderOutput<T> out;
  auto x = add_positions(m_tilde, p["enc.pos"], seg);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    auto b = block_forward(x, p, encoder_block_prefix(i), seg, cfg, mode);
    if (capture_taps) out.taps.push_back(b.ffn_tap);
    x = b.y;
  }
  out.z = detail::apply_ln(x, p, "enc.ln_final");
  return out;
}

}  // namespace avd2v
