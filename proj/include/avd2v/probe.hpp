#pragma once

// Linear probe on frozen encoder features: ridge regression from each
// frame's representation onto a one-hot code of the frame's latent token.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "avd2v/pretrain.hpp"

namespace avd2v {

struct ProbeConfig {
  Modality input = Modality::A;  // modality the frozen encoder sees
  bool masked_only = true;       // fit and score on masked frames only
  double ridge = 1e-2;
  std::uint64_t mask_seed = 7;
  std::size_t batch_frames = 2000;

  void validate() const {
    if (ridge < 0) throw ConfigError("probe.ridge must be >= 0");
  }
};

struct ProbeData {
  Eigen::MatrixXd x;  // frames × (D + 1), last column constant 1
  std::vector<std::size_t> label;
};

/// Frozen (eval-mode) encoder features for the frames of `indices`. Masks
/// are drawn from a fixed stream so every model sees the same frames.
template <class T>
ProbeData probe_features(const Corpus& corpus, const std::vector<std::size_t>& indices, ParamStore<T>& p,
                         const ModelConfig& cfg, const ProbeConfig& pc) {
  pc.validate();
  NoGradGuard no_grad;
  std::vector<std::vector<double>> rows;
  ProbeData out;
  Rng unused(0);
  Rng mask_rng(pc.mask_seed);
  const std::size_t fpt = corpus.spec().frames_per_token;
  for (auto i : indices) {
    auto batch = load_batch(corpus, {i}, pc.batch_frames);
    auto in = prepare_inputs<T>(batch, cfg, false, unused, pc.input != Modality::A);
    auto fused = fused_features(in, {pc.input}, p, cfg, false);
    const std::size_t U = in.seg[0];
    auto mask = sample_mask(U, cfg.mask_prob_percent, cfg.mask_length, mask_rng);
    auto m = pc.masked_only ? apply_mask(fused.m, mask, p["mask_emb"]) : fused.m;
    auto z = encode(m, in.seg, p, cfg.encoder, false, ForwardMode{}).z;
    const auto& toks = corpus[i].tokens;
    for (std::size_t t = 0; t < U; ++t) {
      if (pc.masked_only && !mask.contains(t)) continue;
      auto r = z.data().subspan(t * z.cols(), z.cols());
      rows.emplace_back(r.begin(), r.end());
      out.label.push_back(toks[frame_token_index(t, fpt)]);
    }
  }
  const std::size_t D = rows.empty() ? 0 : rows[0].size();
  out.x.resize(Eigen::Index(rows.size()), Eigen::Index(D + 1));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t d = 0; d < D; ++d) out.x(Eigen::Index(r), Eigen::Index(d)) = rows[r][d];
    out.x(Eigen::Index(r), Eigen::Index(D)) = 1.0;
  }
  return out;
}

/// W = (XᵀX + λI)⁻¹ XᵀY with one-hot Y; the bias column is not penalized.
inline Eigen::MatrixXd fit_probe(const ProbeData& data, std::size_t classes, double ridge) {
  if (data.x.rows() == 0) throw ContractError("fit_probe: no frames");
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(data.x.rows(), Eigen::Index(classes));
  for (std::size_t r = 0; r < data.label.size(); ++r) y(Eigen::Index(r), Eigen::Index(data.label[r])) = 1.0;
  Eigen::MatrixXd gram = data.x.transpose() * data.x;
  for (Eigen::Index d = 0; d + 1 < gram.rows(); ++d) gram(d, d) += ridge;
  return gram.ldlt().solve(data.x.transpose() * y);
}

inline double probe_error(const Eigen::MatrixXd& w, const ProbeData& data) {
  if (data.x.rows() == 0) return 0.0;
  const Eigen::MatrixXd scores = data.x * w;
  std::size_t wrong = 0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index best;
    scores.row(r).maxCoeff(&best);
    if (std::size_t(best) != data.label[std::size_t(r)]) ++wrong;
  }
  return double(wrong) / double(scores.rows());
}

struct ProbeResult {
  double train_error = 0.0;
  double test_error = 0.0;
  std::size_t train_frames = 0;
  std::size_t test_frames = 0;
};

template <class T>
ProbeResult run_probe(const Corpus& corpus, const std::vector<std::size_t>& train, const std::vector<std::size_t>& test,
                      ParamStore<T>& p, const ModelConfig& cfg, const ProbeConfig& pc) {
  const auto tr = probe_features(corpus, train, p, cfg, pc);
  const auto te = probe_features(corpus, test, p, cfg, pc);
  const auto w = fit_probe(tr, corpus.spec().vocab_size, pc.ridge);
  return {probe_error(w, tr), probe_error(w, te), std::size_t(tr.x.rows()), std::size_t(te.x.rows())};
}

}  // namespace avd2v
