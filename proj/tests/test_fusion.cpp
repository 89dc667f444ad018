#include <gtest/gtest.h>

#include "avd2v/fusion.hpp"
#include "test_util.hpp"

using namespace avd2v;
using avd2v::testing::Projector;
using avd2v::testing::randn;

namespace {

TEST(Anneal, LinearBetweenEndpointsThenClamped) {
  ScheduledProb s{1.0, 0.25, 100};
  EXPECT_EQ(anneal_value(s, 0), 1.0);
  EXPECT_NEAR(anneal_value(s, 40), 1.0 - 0.75 * 0.4, 1e-15);
  EXPECT_EQ(anneal_value(s, 100), 0.25);
  EXPECT_EQ(anneal_value(s, 5000), 0.25);
  EXPECT_EQ(anneal_value({0.3, 0.9, 0}, 77), 0.3);
  double prev = 2.0;
  for (std::size_t t = 0; t <= 120; ++t) {
    EXPECT_LE(anneal_value(s, t), prev);
    prev = anneal_value(s, t);
  }
}

TEST(Scheduler, EffectiveProbabilitiesSumToOneAndFollowProductFormula) {
  const auto cfg = ModalityScheduleConfig::student_default();
  for (std::size_t t = 0; t <= 200000; t += 997) {
    const auto p = cfg.at(t);
    EXPECT_EQ((p.av + p.v) + p.a, 1.0) << t;
    const double frac = std::min(double(t) / 150000.0, 1.0);
    const double p_av = 1.0 - 0.75 * frac;
    EXPECT_NEAR(p.av, p_av, 1e-12);
    EXPECT_NEAR(p.v, (1.0 - p_av) * 1.0, 1e-12);
    EXPECT_NEAR(p.a, 0.0, 1e-12);
  }
}

TEST(Scheduler, QuadraticWhenBothFactorsAnneal) {
  ModalityScheduleConfig cfg{{0.8, 0.2, 1000}, {0.1, 0.7, 1000}, {0.9, 0.3, 1000}};
  cfg.validate("test");
  for (std::size_t t = 0; t <= 1200; t += 50) {
    const double f = std::min(double(t) / 1000.0, 1.0);
    const double p_av = 0.8 - 0.6 * f, v_cond = 0.1 + 0.6 * f;
    const auto p = cfg.at(t);
    EXPECT_NEAR(p.v, (1 - p_av) * v_cond, 1e-12);
    EXPECT_NEAR(p.a, (1 - p_av) * (1 - v_cond), 1e-12);
    EXPECT_EQ((p.av + p.v) + p.a, 1.0);
  }
}

TEST(Scheduler, FixedAndAudioOnlyPresets) {
  const auto f = ModalityScheduleConfig::fixed(0.5, 0.2, 0.3).at(123);
  EXPECT_NEAR(f.av, 0.5, 1e-15);
  EXPECT_NEAR(f.a, 0.2, 1e-15);
  EXPECT_NEAR(f.v, 0.3, 1e-15);
  const auto a = ModalityScheduleConfig::audio_only().at(9);
  EXPECT_EQ(a.a, 1.0);
  EXPECT_THROW(ModalityScheduleConfig::fixed(0.5, 0.5, 0.5), ConfigError);
}

TEST(Scheduler, RejectsInconsistentConditionals) {
  ModalityScheduleConfig bad{{1.0, 0.5, 10}, {0.6, 0.6, 10}, {0.6, 0.6, 10}};
  EXPECT_THROW(bad.validate("student"), ConfigError);
  ModalityScheduleConfig range{{1.5, 0.5, 10}, {1.0, 1.0, 10}, {0.0, 0.0, 10}};
  EXPECT_THROW(range.validate("student"), ConfigError);
}

TEST(Scheduler, SelectionFrequenciesWithinThreeSigma) {
  Rng rng(3);
  const ModalityProbs p{0.5, 0.2, 0.3};
  const int n = 100000;
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[int(select_modality(rng, p))];
  for (auto [k, q] : {std::pair{0, p.av}, {1, p.a}, {2, p.v}})
    EXPECT_LT(std::abs(counts[k] - n * q), 3 * std::sqrt(n * q * (1 - q))) << k;
}

TEST(Fusion, AdditiveOrSingleStream) {
  Rng rng(4);
  auto a = randn({3, 4}, rng), v = randn({3, 4}, rng);
  auto av = fuse(a, v, Modality::AV);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(av.data()[i], a.data()[i] + v.data()[i]);
  EXPECT_EQ(fuse(a, v, Modality::A).node(), a.node());
  EXPECT_EQ(fuse(a, v, Modality::V).node(), v.node());
  EXPECT_EQ(fuse(a, Tensor<double>(), Modality::A).node(), a.node());
  EXPECT_THROW(fuse(a, Tensor<double>(), Modality::AV), ContractError);
  EXPECT_THROW(fuse(a, randn({2, 4}, rng), Modality::AV), DimensionError);
}

TEST(Masking, DeterministicUnderSeed) {
  Rng a(42), b(42), c(43);
  const auto m1 = sample_mask(200, 50, 10, a);
  const auto m2 = sample_mask(200, 50, 10, b);
  const auto m3 = sample_mask(200, 50, 10, c);
  EXPECT_EQ(m1.indices, m2.indices);
  EXPECT_NE(m1.indices, m3.indices);
  EXPECT_TRUE(std::is_sorted(m1.indices.begin(), m1.indices.end()));
}

TEST(Masking, ExtremesAndSpanClipping) {
  Rng rng(1);
  EXPECT_EQ(sample_mask(30, 0, 10, rng).size(), 0u);
  EXPECT_EQ(sample_mask(30, 100, 10, rng).size(), 30u);
  const auto m = sample_mask(5, 100, 10, rng);
  EXPECT_EQ(m.indices, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_THROW(sample_mask(0, 50, 10, rng), ContractError);
  EXPECT_THROW(sample_mask(5, 50, 0, rng), ContractError);
}

// A step t is masked unless none of the min(t+1, l) preceding starts fired.
double expected_coverage(std::size_t U, double r, std::size_t l) {
  double total = 0;
  for (std::size_t t = 0; t < U; ++t) total += 1.0 - std::pow(1.0 - r, double(std::min(t + 1, l)));
  return total / double(U);
}

TEST(Masking, MonteCarloCoverageMatchesClosedForm) {
  double sum = 0;
  const int seeds = 2000;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(11, s));
    sum += double(sample_mask(20, 50, 10, rng).size()) / 20.0;
  }
  EXPECT_NEAR(sum / seeds, expected_coverage(20, 0.5, 10), 0.01);
}

TEST(Masking, ApplyMaskReplacesRowsAndRoutesGradients) {
  Rng rng(5);
  auto m = randn({6, 3}, rng), e = randn({3}, rng);
  MaskSet mask{6, {1, 2, 5}};
  auto out = apply_mask(m, mask, e);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t d = 0; d < 3; ++d)
      EXPECT_EQ(out.at(t, d), mask.contains(t) ? e.data()[d] : m.at(t, d));
  Projector P(6);
  auto r = grad_check([&] { return P(apply_mask(m, mask, e)); }, {{"m", m}, {"e", e}});
  EXPECT_LT(r.max_rel_error(), 1e-8);
  EXPECT_THROW(apply_mask(m, MaskSet{6, {6}}, e), ContractError);
  EXPECT_THROW(apply_mask(m, mask, randn({4}, rng)), DimensionError);
}

}  // namespace
