#include <gtest/gtest.h>

#include "avd2v/probe.hpp"
#include "tiny_run.hpp"

using namespace avd2v;

namespace {

ProbeData blobs(std::size_t n, std::size_t classes, double spread, Rng& rng) {
  ProbeData d;
  d.x.resize(Eigen::Index(n), Eigen::Index(classes + 1));
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = rng.below(classes);
    d.label.push_back(c);
    for (std::size_t j = 0; j < classes; ++j) d.x(Eigen::Index(r), Eigen::Index(j)) = (j == c ? 3.0 : 0.0) + spread * rng.normal();
    d.x(Eigen::Index(r), Eigen::Index(classes)) = 1.0;
  }
  return d;
}

TEST(Probe, SeparableFeaturesGiveZeroError) {
  Rng rng(1);
  const auto tr = blobs(300, 4, 0.1, rng), te = blobs(100, 4, 0.1, rng);
  const auto w = fit_probe(tr, 4, 1e-2);
  EXPECT_EQ(probe_error(w, tr), 0.0);
  EXPECT_EQ(probe_error(w, te), 0.0);
}

TEST(Probe, NoiseFeaturesStayNearChance) {
  Rng rng(2);
  auto tr = blobs(2000, 4, 1.0, rng), te = blobs(2000, 4, 1.0, rng);
  for (auto* d : {&tr, &te})
    for (Eigen::Index r = 0; r < d->x.rows(); ++r)
      for (Eigen::Index j = 0; j < 4; ++j) d->x(r, j) = rng.normal();
  const auto w = fit_probe(tr, 4, 1e-2);
  EXPECT_NEAR(probe_error(w, te), 0.75, 0.05);
}

TEST(Probe, RidgeSolutionSatisfiesNormalEquations) {
  Rng rng(3);
  const auto d = blobs(50, 3, 1.0, rng);
  const double lambda = 0.5;
  const auto w = fit_probe(d, 3, lambda);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(50, 3);
  for (std::size_t r = 0; r < 50; ++r) y(Eigen::Index(r), Eigen::Index(d.label[r])) = 1;
  Eigen::MatrixXd reg = Eigen::MatrixXd::Identity(4, 4) * lambda;
  reg(3, 3) = 0;
  const Eigen::MatrixXd resid = (d.x.transpose() * d.x + reg) * w - d.x.transpose() * y;
  EXPECT_LT(resid.cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(fit_probe(ProbeData{}, 3, 0.1), ContractError);
}

TEST(Probe, FeaturesFollowTheMaskAndModalityChoice) {
  const auto rc = avd2v::testing::tiny_resolved();
  const auto corpus = avd2v::testing::tiny_corpus(rc.corpus);
  auto state = init_pretrain_state<float>(rc.pretrain, 1);
  ProbeConfig pc = rc.probe;
  pc.masked_only = false;
  const auto all = probe_features(corpus, {0, 1}, state.student, rc.pretrain.model, pc);
  EXPECT_EQ(std::size_t(all.x.rows()), corpus[0].frames() + corpus[1].frames());
  EXPECT_EQ(std::size_t(all.x.cols()), rc.pretrain.model.encoder.dim + 1);
  pc.masked_only = true;
  const auto masked = probe_features(corpus, {0, 1}, state.student, rc.pretrain.model, pc);
  EXPECT_LT(masked.x.rows(), all.x.rows());
  const auto again = probe_features(corpus, {0, 1}, state.student, rc.pretrain.model, pc);
  EXPECT_EQ(masked.x, again.x);
  pc.input = Modality::V;
  const auto video = probe_features(corpus, {0, 1}, state.student, rc.pretrain.model, pc);
  EXPECT_EQ(video.label, masked.label);
  EXPECT_NE(video.x, masked.x);
}

}  // namespace
