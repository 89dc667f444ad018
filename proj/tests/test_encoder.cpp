#include <gtest/gtest.h>

#include "avd2v/encoder.hpp"
#include "test_util.hpp"

using namespace avd2v;
using avd2v::testing::max_abs_diff;
using avd2v::testing::Projector;
using avd2v::testing::randn;

namespace {

EncoderConfig tiny() { return {2, 8, 16, 2, 0.0, 32}; }

ParamStore<double> tiny_params(const EncoderConfig& cfg, std::uint64_t seed = 1) {
  Rng rng(seed);
  ParamStore<double> p;
  init_encoder(p, cfg, rng);
  return p;
}

TEST(EncoderConfig, PaperPresetsAndValidation) {
  const auto b = EncoderConfig::base(), l = EncoderConfig::large();
  EXPECT_EQ(b.n_blocks, 12u);
  EXPECT_EQ(b.dim, 768u);
  EXPECT_EQ(b.ffn_dim, 3072u);
  EXPECT_EQ(b.n_heads, 12u);
  EXPECT_EQ(l.n_blocks, 24u);
  EXPECT_EQ(l.dim, 1024u);
  EXPECT_EQ(l.ffn_dim, 4096u);
  EXPECT_EQ(l.n_heads, 16u);
  EXPECT_THROW((EncoderConfig{2, 10, 16, 3, 0.0, 32}.validate()), ConfigError);
}

TEST(Attention, RowsSumToOne) {
  Rng rng(2);
  auto q = randn({5, 8}, rng), k = randn({7, 8}, rng);
  for (std::size_t h = 0; h < 2; ++h) {
    auto w = attention_weights(q, k, 2, h);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += w.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, SegmentsAreIsolated) {
  Rng rng(3);
  auto q = randn({7, 8}, rng), k = randn({7, 8}, rng), v = randn({7, 8}, rng);
  const Segments seg{3, 4};
  auto out = attend(q, k, v, seg, seg, 2, false);
  auto alone = attend(slice(q, 0, 0, 3), slice(k, 0, 0, 3), slice(v, 0, 0, 3), {3}, {3}, 2, false);
  EXPECT_LT(max_abs_diff(slice(out, 0, 0, 3).data(), alone.data()), 1e-12);
  // Perturbing segment 2 leaves segment 1 untouched.
  for (std::size_t i = 3 * 8; i < 7 * 8; ++i) v.mutable_data()[i] += 10.0;
  auto out2 = attend(q, k, v, seg, seg, 2, false);
  EXPECT_LT(max_abs_diff(slice(out2, 0, 0, 3).data(), alone.data()), 1e-12);
}

TEST(Attention, CausalRowsIgnoreFuture) {
  Rng rng(4);
  auto q = randn({5, 8}, rng), k = randn({5, 8}, rng), v = randn({5, 8}, rng);
  auto out = attend(q, k, v, {5}, {5}, 2, true);
  for (std::size_t i = 8 * 3; i < 8 * 5; ++i) {
    k.mutable_data()[i] += 3.0;
    v.mutable_data()[i] -= 2.0;
  }
  auto out2 = attend(q, k, v, {5}, {5}, 2, true);
  EXPECT_LT(max_abs_diff(slice(out, 0, 0, 3).data(), slice(out2, 0, 0, 3).data()), 1e-12);
  EXPECT_GT(max_abs_diff(slice(out, 0, 3, 5).data(), slice(out2, 0, 3, 5).data()), 1e-3);
}

TEST(Encoder, OutputShapeAndOneTapPerBlock) {
  const auto cfg = tiny();
  auto p = tiny_params(cfg);
  Rng rng(5);
  auto out = encode(randn({9, 8}, rng), {4, 5}, p, cfg, true, ForwardMode{});
  EXPECT_EQ(out.z.shape(), (Shape{9, 8}));
  ASSERT_EQ(out.taps.size(), 2u);
  for (const auto& t : out.taps) EXPECT_EQ(t.shape(), (Shape{9, 8}));
  EXPECT_TRUE(encode(randn({9, 8}, rng), {4, 5}, p, cfg, false, ForwardMode{}).taps.empty());
}

TEST(Encoder, TapIsTheLastResidualAddend) {
  const auto cfg = tiny();
  auto p = tiny_params(cfg);
  Rng rng(6);
  auto x = randn({6, 8}, rng);
  auto b = block_forward(x, p, encoder_block_prefix(0), {6}, cfg, ForwardMode{});
  auto recomposed = add(b.after_attention, b.ffn_tap);
  EXPECT_EQ(max_abs_diff(recomposed.data(), b.y.data()), 0.0);
}

TEST(Encoder, BatchedEqualsPerUtteranceWithRestartedPositions) {
  const auto cfg = tiny();
  auto p = tiny_params(cfg);
  Rng rng(7);
  auto a = randn({4, 8}, rng), b = randn({6, 8}, rng);
  auto both = encode(concat<double>({a, b}, 0), {4, 6}, p, cfg, false, ForwardMode{}).z;
  auto za = encode(a, {4}, p, cfg, false, ForwardMode{}).z;
  auto zb = encode(b, {6}, p, cfg, false, ForwardMode{}).z;
  EXPECT_LT(max_abs_diff(slice(both, 0, 0, 4).data(), za.data()), 1e-12);
  EXPECT_LT(max_abs_diff(slice(both, 0, 4, 10).data(), zb.data()), 1e-12);
}

TEST(Encoder, RejectsBadShapes) {
  const auto cfg = tiny();
  auto p = tiny_params(cfg);
  Rng rng(8);
  EXPECT_THROW(encode(randn({4, 6}, rng), {4}, p, cfg, false, ForwardMode{}), DimensionError);
  EXPECT_THROW(encode(randn({4, 8}, rng), {3}, p, cfg, false, ForwardMode{}), DimensionError);
  EXPECT_THROW(encode(randn({40, 8}, rng), {40}, p, cfg, false, ForwardMode{}), DimensionError);
}

TEST(Encoder, TrainingModeNeedsRngAndEvalIsDeterministic) {
  auto cfg = tiny();
  cfg.dropout = 0.1;
  auto p = tiny_params(cfg);
  Rng rng(9);
  auto x = randn({5, 8}, rng);
  EXPECT_THROW(encode(x, {5}, p, cfg, false, ForwardMode{true, nullptr}), ContractError);
  auto e1 = encode(x, {5}, p, cfg, false, ForwardMode{}).z;
  auto e2 = encode(x, {5}, p, cfg, false, ForwardMode{}).z;
  EXPECT_EQ(max_abs_diff(e1.data(), e2.data()), 0.0);
}

TEST(Encoder, FullStackGradientCheck) {
  const auto cfg = tiny();
  auto p = tiny_params(cfg);
  Rng rng(10);
  auto x = randn({7, 8}, rng);
  Projector P(11);
  std::vector<NamedLeaf> leaves{{"x", x}};
  for (auto& e : p.entries()) leaves.push_back({e.name, e.value});
  auto r = grad_check(
      [&] {
        auto out = encode(x, {3, 4}, p, cfg, true, ForwardMode{});
        auto loss = P(out.z);
        for (std::size_t i = 0; i < out.taps.size(); ++i) loss = add(loss, P(out.taps[i], i + 1));
        return loss;
      },
      leaves);
  EXPECT_FALSE(r.non_finite);
  for (const auto& e : r.entries) EXPECT_LT(e.rel_error, 1e-6) << e.name;
}

}  // namespace
