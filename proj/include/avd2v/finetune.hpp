#pragma once

// Sequence-to-sequence fine-tuning: a transformer decoder attends over the
// encoder output and is trained with cross-entropy; decoding is greedy or
// beam search; evaluation is token error rate.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "avd2v/pretrain.hpp"

namespace avd2v {

enum class Task { ASR, VSR, AVSR };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::ASR: return "asr";
    case Task::VSR: return "vsr";
    case Task::AVSR: return "avsr";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "asr") return Task::ASR;
  if (s == "vsr") return Task::VSR;
  if (s == "avsr") return Task::AVSR;
  throw ConfigError("unknown task '" + s + "' (expected asr, vsr or avsr)");
}

/// Modality the encoder sees for a task. A zeroed feature stream contributes
/// nothing to the additive fusion, so ASR and VSR reduce to A and V.
inline Modality task_modality(Task t) {
  switch (t) {
    case Task::ASR: return Modality::A;
    case Task::VSR: return Modality::V;
    case Task::AVSR: return Modality::AV;
  }
  return Modality::AV;
}

/// Zeroes the raw input slot a task does not use.
inline ModalityBatch zero_modality(ModalityBatch batch, Task t) {
  if (t == Task::ASR) std::fill(batch.video.begin(), batch.video.end(), 0.0f);
  if (t == Task::VSR) std::fill(batch.audio.begin(), batch.audio.end(), 0.0f);
  return batch;
}

// ---------------------------------------------------------------------------
// Tokens

inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kFirstToken = 3;

/// Corpus token ids shifted past the specials.
inline std::vector<std::size_t> to_decoder_ids(const std::vector<std::uint32_t>& tokens) {
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size());
  for (auto t : tokens) ids.push_back(std::size_t(t) + kFirstToken);
  return ids;
}

/// Drops specials and everything after the first EOS.
inline std::vector<std::uint32_t> from_decoder_ids(const std::vector<std::size_t>& ids) {
  std::vector<std::uint32_t> out;
  for (auto i : ids) {
    if (i == kEos) break;
    if (i >= kFirstToken) out.push_back(static_cast<std::uint32_t>(i - kFirstToken));
  }
  return out;
}

template <class Tok>
std::size_t edit_distance(const std::vector<Tok>& a, const std::vector<Tok>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t(0));
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <class Tok>
double token_error_rate(const std::vector<Tok>& hyp, const std::vector<Tok>& ref) {
  return double(edit_distance(hyp, ref)) / double(std::max<std::size_t>(1, ref.size()));
}

// ---------------------------------------------------------------------------
// Decoder

struct DecoderConfig {
  std::size_t n_blocks = 6;
  std::size_t dim = 768;
  std::size_t ffn_dim = 3072;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 32;
  std::size_t max_positions = 256;
  double dropout = 0.1;

  static DecoderConfig base() { return {6, 768, 3072, 4, 32, 256, 0.1}; }
  static DecoderConfig large() { return {9, 1024, 4096, 8, 32, 256, 0.1}; }

  void validate(std::size_t encoder_dim) const {
    if (n_blocks < 1) throw ConfigError("decoder.n_blocks must be >= 1");
    if (n_heads == 0 || dim % n_heads != 0) throw ConfigError("decoder.dim must be divisible by decoder.n_heads");
    if (dim != encoder_dim) throw ConfigError("decoder.dim must equal model.dim");
    if (vocab_size <= kFirstToken) throw ConfigError("decoder.vocab_size must exceed the 3 special tokens");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("decoder.dropout must lie in [0, 1)");
  }

};

inline std::string decoder_block_prefix(std::size_t i) { return "dec.b" + std::to_string(i); }

template <class T>
void init_decoder(ParamStore<T>& p, const DecoderConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.dim;
  p.add("dec.emb", init::normal<T>({cfg.vocab_size, d}, rng, 1.0));
  p.add("dec.pos", init::sinusoidal<T>(cfg.max_positions, d));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const auto pre = decoder_block_prefix(i);
    detail::add_ln(p, pre + ".ln1", d);
    detail::add_linear(p, pre + ".self.qkv", d, 3 * d, rng);
    detail::add_linear(p, pre + ".self.out", d, d, rng);
    detail::add_ln(p, pre + ".ln2", d);
    detail::add_linear(p, pre + ".cross.q", d, d, rng);
    detail::add_linear(p, pre + ".cross.kv", d, 2 * d, rng);
    detail::add_linear(p, pre + ".cross.out", d, d, rng);
    detail::add_ln(p, pre + ".ln3", d);
    detail::add_linear(p, pre + ".ffn.fc1", d, cfg.ffn_dim, rng);
    detail::add_linear(p, pre + ".ffn.fc2", cfg.ffn_dim, d, rng);
  }
  detail::add_ln(p, "dec.ln_final", d);
  detail::add_linear(p, "dec.out", d, cfg.vocab_size, rng);
}

inline bool is_decoder_param(const std::string& name) { return name.rfind("dec.", 0) == 0; }

/// Logits [ΣS × vocab] for stacked prefixes. Prefix b attends causally to
/// itself and fully to encoder segment b of z.
template <class T>
Tensor<T> decoder_forward(const Tensor<T>& z, const Segments& seg_z, const std::vector<std::vector<std::size_t>>& prefixes,
                          const ParamStore<T>& p, const DecoderConfig& cfg, const ForwardMode& mode) {
  if (prefixes.size() != seg_z.size()) throw DimensionError("decoder_forward: one prefix per encoder segment");
  if (z.rank() != 2 || z.cols() != cfg.dim) throw DimensionError("decoder_forward: encoder output " + shape_str(z.shape()));
  Segments seg;
  std::vector<std::size_t> ids, pos;
  for (const auto& pf : prefixes) {
    if (pf.empty()) throw DimensionError("decoder_forward: empty prefix");
    if (pf.size() > cfg.max_positions) throw DimensionError("decoder_forward: prefix exceeds decoder.max_positions");
    seg.push_back(pf.size());
    for (std::size_t t = 0; t < pf.size(); ++t) {
      if (pf[t] >= cfg.vocab_size) throw DimensionError("decoder_forward: token id out of vocabulary");
      ids.push_back(pf[t]);
      pos.push_back(t);
    }
  }
  const std::size_t d = cfg.dim;
  auto x = add(embedding(p["dec.emb"], ids), embedding(p["dec.pos"], pos));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const auto pre = decoder_block_prefix(i);
    auto sa = self_attention(detail::apply_ln(x, p, pre + ".ln1"), p, pre + ".self", seg, cfg.n_heads, true);
    x = add(x, mode.drop(sa, cfg.dropout));
    auto q = detail::apply_linear(detail::apply_ln(x, p, pre + ".ln2"), p, pre + ".cross.q");
    auto kv = detail::apply_linear(z, p, pre + ".cross.kv");
    auto ca = attend(q, slice(kv, 1, 0, d), slice(kv, 1, d, 2 * d), seg, seg_z, cfg.n_heads, false);
    x = add(x, mode.drop(detail::apply_linear(ca, p, pre + ".cross.out"), cfg.dropout));
    auto h = gelu(detail::apply_linear(detail::apply_ln(x, p, pre + ".ln3"), p, pre + ".ffn.fc1"));
    x = add(x, mode.drop(detail::apply_linear(h, p, pre + ".ffn.fc2"), cfg.dropout));
  }
  return detail::apply_linear(detail::apply_ln(x, p, "dec.ln_final"), p, "dec.out");
}

/// Teacher-forcing pair for one reference: input [BOS w1..wS], target [w1..wS EOS].
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> teacher_forcing(
    const std::vector<std::uint32_t>& tokens) {
  auto ids = to_decoder_ids(tokens);
  std::vector<std::size_t> in{kBos};
  in.insert(in.end(), ids.begin(), ids.end());
  ids.push_back(kEos);
  return {in, ids};
}

/// Mean negative log-likelihood over non-PAD targets.
template <class T>
Tensor<T> ce_loss(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  return cross_entropy(logits, targets, kPad);
}

// ---------------------------------------------------------------------------
// Decoding

struct Hypothesis {
  std::vector<std::size_t> tokens;  // generated ids, EOS included when finished
  double log_prob = 0.0;
  bool finished = false;

  double score(bool length_norm) const {
    return length_norm ? log_prob / double(std::max<std::size_t>(1, tokens.size())) : log_prob;
  }
};

/// Scores a batch of prefixes (generated ids only, without BOS); returns one
/// log-probability row over the vocabulary per prefix.
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<std::size_t>>&)>;

struct BeamOptions {
  std::size_t beam_width = 5;
  std::size_t max_len = 64;
  bool length_norm = true;
  std::size_t eos = kEos;  // an id >= vocab disables early termination
};

/// Arg-max rollout.
inline Hypothesis greedy_decode(const StepScorer& scorer, std::size_t max_len, std::size_t eos = kEos) {
  Hypothesis h;
  while (h.tokens.size() < max_len) {
    const auto rows = scorer({h.tokens});
    const auto& lp = rows.at(0);
    const auto best = std::size_t(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(best);
    h.log_prob += lp[best];
    if (best == eos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

/// Beam search. Candidates are ranked by (length-normalized) log-probability;
/// ties keep expansion order, so width 1 reproduces the greedy rollout.
inline Hypothesis beam_decode(const StepScorer& scorer, const BeamOptions& opt) {
  if (opt.beam_width < 1) throw ConfigError("beam width must be >= 1");
  std::vector<Hypothesis> alive(1), finished;
  for (std::size_t step = 0; step < opt.max_len && !alive.empty(); ++step) {
    std::vector<std::vector<std::size_t>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.tokens);
    const auto rows = scorer(prefixes);
    std::vector<Hypothesis> cand;
    for (std::size_t i = 0; i < alive.size(); ++i)
      for (std::size_t v = 0; v < rows[i].size(); ++v) {
        Hypothesis h = alive[i];
        h.tokens.push_back(v);
        h.log_prob += rows[i][v];
        h.finished = v == opt.eos;
        cand.push_back(std::move(h));
      }
    std::stable_sort(cand.begin(), cand.end(), [&](const Hypothesis& a, const Hypothesis& b) {
      return a.score(opt.length_norm) > b.score(opt.length_norm);
    });
    alive.clear();
    for (auto& h : cand) {
      if (h.finished)
        finished.push_back(std::move(h));
      else
        alive.push_back(std::move(h));
      if (alive.size() >= opt.beam_width) break;
    }
    if (finished.size() >= opt.beam_width) break;
  }
  auto pool = finished.empty() ? alive : finished;
  if (pool.empty()) return {};
  return *std::max_element(pool.begin(), pool.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return a.score(opt.length_norm) < b.score(opt.length_norm);
  });
}

template <class T>
std::vector<double> log_softmax_row(std::span<const T> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : row) mx = std::max(mx, double(v));
  double s = 0;
  for (T v : row) s += std::exp(double(v) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out;
  out.reserve(row.size());
  for (T v : row) out.push_back(double(v) - lse);
  return out;
}

/// Step scorer over one utterance's encoder output.
template <class T>
StepScorer model_scorer(const Tensor<T>& z, const ParamStore<T>& p, const DecoderConfig& cfg) {
  return [&z, &p, &cfg](const std::vector<std::vector<std::size_t>>& prefixes) {
    NoGradGuard no_grad;
    std::vector<std::vector<std::size_t>> inputs;
    Segments seg_z(prefixes.size(), z.rows());
    std::vector<Tensor<T>> zs(prefixes.size(), z);
    for (const auto& pf : prefixes) {
      std::vector<std::size_t> in{kBos};
      in.insert(in.end(), pf.begin(), pf.end());
      inputs.push_back(std::move(in));
    }
    auto logits = decoder_forward(zs.size() == 1 ? z : concat(zs, 0), seg_z, inputs, p, cfg, ForwardMode{});
    std::vector<std::vector<double>> out;
    std::size_t row = 0;
    const std::size_t V = logits.cols();
    for (const auto& in : inputs) {
      row += in.size();
      out.push_back(log_softmax_row<T>(logits.data().subspan((row - 1) * V, V)));
    }
    return out;
  };
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
  ModelConfig model;
  DecoderConfig decoder;
  Task task = Task::AVSR;
  double lr = 1e-3;
  std::size_t updates = 1000;
  std::size_t warmup = 100;
  std::size_t hold = 0;             // tri-stage only
  double init_scale = 0.01;         // tri-stage only
  double final_scale = 0.05;        // tri-stage only
  std::size_t freeze_steps = 0;
  AdamConfig adam;

  void validate() const {
    model.validate();
    decoder.validate(model.encoder.dim);
    if (lr <= 0) throw ConfigError("finetune.lr must be positive");
    if (freeze_steps > updates) throw ConfigError("finetune.freeze_steps must not exceed finetune.updates");
    if (task == Task::VSR) {
      if (warmup > updates) throw ConfigError("finetune.warmup must not exceed finetune.updates");
    } else {
      if (warmup + hold > updates) throw ConfigError("finetune.warmup + finetune.hold must not exceed finetune.updates");
      if (init_scale <= 0 || final_scale <= 0) throw ConfigError("tri-stage scales must be positive");
    }
  }

  double lr_at(std::size_t step) const {
    return task == Task::VSR ? cosine_lr(step, warmup, updates, lr)
                             : tri_stage_lr(step, warmup, hold, updates, lr, init_scale, final_scale);
  }
};

/// Encoder (from a pre-trained student, or freshly initialized) plus a new
/// decoder. Optimizer state starts empty.
template <class T>
ModelState<T> init_finetune_state(const FinetuneConfig& cfg, std::uint64_t seed, const ParamStore<T>* pretrained) {
  cfg.validate();
  ModelState<T> s;
  Rng init_rng(derive_seed(seed, 0xF17EULL));
  init_model(s.student, cfg.model, init_rng);
  init_decoder(s.student, cfg.decoder, init_rng);
  if (pretrained) {
    for (const auto& e : s.student.entries()) {
      if (is_decoder_param(e.name)) continue;
      if (!pretrained->contains(e.name))
        throw ConfigError("pre-trained checkpoint lacks '" + e.name + "'; model config does not match");
      if (pretrained->get(e.name).shape() != e.value.shape())
        throw ConfigError("pre-trained '" + e.name + "' has shape " + shape_str(pretrained->get(e.name).shape()) +
                          ", model config expects " + shape_str(e.value.shape()));
    }
    s.student.assign_matching(*pretrained);
  }
  s.adam = AdamState<T>::for_params(s.student);
  s.rng = Rng(derive_seed(seed, 0x5EEDULL));
  return s;
}

/// Encoder output for a batch under a task's modality.
template <class T>
Tensor<T> encode_for_task(const ModalityBatch& batch, ParamStore<T>& p, const ModelConfig& cfg, Task task,
                          bool training, Rng& rng, Segments* seg_out = nullptr) {
  const auto sel = task_modality(task);
  auto in = prepare_inputs<T>(zero_modality(batch, task), cfg, training, rng, sel != Modality::A);
  auto fused = fused_features(in, std::vector<Modality>(batch.size(), sel), p, cfg, training);
  ForwardMode mode{training, &rng};
  if (seg_out) *seg_out = in.seg;
  return encode(fused.m, in.seg, p, cfg.encoder, false, mode).z;
}

struct FinetuneMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double token_accuracy = 0.0;  // teacher-forced arg-max accuracy
  bool encoder_frozen = false;
  double wall_ms = 0.0;
};

template <class T>
FinetuneMetrics finetune_step(const ModalityBatch& batch, ModelState<T>& state, const FinetuneConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  FinetuneMetrics m;
  m.step = state.step;
  m.lr = cfg.lr_at(state.step);
  m.encoder_frozen = state.step < cfg.freeze_steps;

  state.student.zero_grad();
  Segments seg;
  Tensor<T> z;
  if (m.encoder_frozen) {
    NoGradGuard no_grad;
    z = encode_for_task(batch, state.student, cfg.model, cfg.task, false, state.rng, &seg);
  } else {
    z = encode_for_task(batch, state.student, cfg.model, cfg.task, true, state.rng, &seg);
  }

  std::vector<std::vector<std::size_t>> inputs;
  std::vector<std::size_t> targets;
  for (const auto& toks : batch.tokens) {
    auto [in, tgt] = teacher_forcing(toks);
    inputs.push_back(std::move(in));
    targets.insert(targets.end(), tgt.begin(), tgt.end());
  }
  ForwardMode train{true, &state.rng};
  auto logits = decoder_forward(z, seg, inputs, state.student, cfg.decoder, train);
  auto loss = ce_loss(logits, targets);
  m.loss = double(loss.item());
  if (!std::isfinite(m.loss))
    throw NumericError("finetune_step " + std::to_string(state.step) + ": non-finite loss (first utterance " +
                       batch.utt_ids.front() + ")");
  std::size_t correct = 0;
  const std::size_t V = logits.cols();
  for (std::size_t r = 0; r < targets.size(); ++r) {
    auto row = logits.data().subspan(r * V, V);
    if (std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == targets[r]) ++correct;
  }
  m.token_accuracy = double(correct) / double(targets.size());

  backward(loss);
  const auto rep = adam_step(state.student, state.adam, m.lr, cfg.adam);
  state.student.zero_grad();
  if (!rep.applied)
    throw NumericError("finetune_step " + std::to_string(state.step) + ": non-finite gradients, step rejected");
  m.grad_norm = rep.grad_norm;
  ++state.step;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return m;
}

struct DecodeResult {
  std::string utt_id;
  std::vector<std::uint32_t> hyp;
  std::vector<std::uint32_t> ref;
  double score = 0.0;
};

/// Decodes every utterance of a batch independently (beam 1 = greedy).
template <class T>
std::vector<DecodeResult> decode_batch(const ModalityBatch& batch, ParamStore<T>& p, const FinetuneConfig& cfg,
                                       std::size_t beam, std::size_t max_len, bool length_norm = true) {
  NoGradGuard no_grad;
  Rng unused(0);
  Segments seg;
  auto z = encode_for_task(batch, p, cfg.model, cfg.task, false, unused, &seg);
  std::vector<DecodeResult> out;
  std::size_t off = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto zb = seg.size() == 1 ? z : slice(z, 0, off, off + seg[b]);
    off += seg[b];
    auto scorer = model_scorer(zb, p, cfg.decoder);
    const auto h = beam <= 1 ? greedy_decode(scorer, max_len) : beam_decode(scorer, {beam, max_len, length_norm, kEos});
    out.push_back({batch.utt_ids[b], from_decoder_ids(h.tokens), batch.tokens[b], h.score(length_norm)});
  }
  return out;
}

/// Corpus-level rate: total edits over total reference tokens.
inline double corpus_ter(const std::vector<DecodeResult>& results) {
  std::size_t edits = 0, ref = 0;
  for (const auto& r : results) {
    edits += edit_distance(r.hyp, r.ref);
    ref += r.ref.size();
  }
  return double(edits) / double(std::max<std::size_t>(1, ref));
}

}  // namespace avd2v
