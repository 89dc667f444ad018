#include <gtest/gtest.h>

#include "avd2v/finetune.hpp"
#include "lattice.hpp"
#include "test_util.hpp"
#include "tiny_run.hpp"

using namespace avd2v;
using avd2v::testing::max_abs_diff;
using avd2v::testing::randn;

namespace {

DecoderConfig tiny_decoder() { return {1, 8, 16, 2, 7, 12, 0.0}; }

ParamStore<double> decoder_params(const DecoderConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<double> p;
  init_decoder(p, cfg, rng);
  return p;
}

TEST(Ter, EditDistanceExamples) {
  using V = std::vector<int>;
  EXPECT_EQ(edit_distance(V{1, 2, 3}, V{1, 2, 3}), 0u);
  EXPECT_EQ(edit_distance(V{}, V{1, 2}), 2u);
  EXPECT_EQ(edit_distance(V{1, 2}, V{}), 2u);
  EXPECT_EQ(edit_distance(V{1, 3, 4}, V{1, 2, 3}), 2u);
  EXPECT_EQ(edit_distance(V{2, 1}, V{1, 2}), 2u);
  EXPECT_DOUBLE_EQ(token_error_rate(V{1, 2, 4}, V{1, 2, 3, 5}), 0.5);
  EXPECT_DOUBLE_EQ(token_error_rate(V{7}, V{}), 1.0);
  std::vector<DecodeResult> rs{{"a", {1, 2}, {1, 2, 3}, 0}, {"b", {}, {4}, 0}};
  EXPECT_DOUBLE_EQ(corpus_ter(rs), 0.5);
}

TEST(Tokens, TeacherForcingShiftsAndMapsIds) {
  auto [in, tgt] = teacher_forcing({0, 5, 2});
  EXPECT_EQ(in, (std::vector<std::size_t>{kBos, 3, 8, 5}));
  EXPECT_EQ(tgt, (std::vector<std::size_t>{3, 8, 5, kEos}));
  EXPECT_EQ(from_decoder_ids({3, 8, kEos}), (std::vector<std::uint32_t>{0, 5}));
}

TEST(Decoder, PrefixRowsMatchStepByStepRollout) {
  const auto cfg = tiny_decoder();
  auto p = decoder_params(cfg, 1);
  Rng rng(2);
  auto z = randn({9, 8}, rng);
  const std::vector<std::size_t> prefix{kBos, 4, 3, 6, 5};
  auto full = decoder_forward(z, {9}, {prefix}, p, cfg, ForwardMode{});
  for (std::size_t t = 1; t <= prefix.size(); ++t) {
    std::vector<std::size_t> head(prefix.begin(), prefix.begin() + t);
    auto part = decoder_forward(z, {9}, {head}, p, cfg, ForwardMode{});
    EXPECT_LT(max_abs_diff(slice(part, 0, t - 1, t).data(), slice(full, 0, t - 1, t).data()), 1e-12) << t;
  }
}

TEST(Decoder, FutureTokensDoNotLeakIntoEarlierRows) {
  const auto cfg = tiny_decoder();
  auto p = decoder_params(cfg, 3);
  Rng rng(4);
  auto z = randn({6, 8}, rng);
  auto a = decoder_forward(z, {6}, {{kBos, 3, 4, 5}}, p, cfg, ForwardMode{});
  auto b = decoder_forward(z, {6}, {{kBos, 3, 6, 6}}, p, cfg, ForwardMode{});
  EXPECT_LT(max_abs_diff(slice(a, 0, 0, 2).data(), slice(b, 0, 0, 2).data()), 1e-12);
  EXPECT_GT(max_abs_diff(slice(a, 0, 2, 4).data(), slice(b, 0, 2, 4).data()), 1e-6);
}

TEST(Decoder, BatchedPrefixesMatchSeparateCalls) {
  const auto cfg = tiny_decoder();
  auto p = decoder_params(cfg, 5);
  Rng rng(6);
  auto z1 = randn({5, 8}, rng), z2 = randn({7, 8}, rng);
  const std::vector<std::size_t> p1{kBos, 3}, p2{kBos, 5, 4, 3};
  auto both = decoder_forward(concat<double>({z1, z2}, 0), {5, 7}, {p1, p2}, p, cfg, ForwardMode{});
  auto a = decoder_forward(z1, {5}, {p1}, p, cfg, ForwardMode{});
  auto b = decoder_forward(z2, {7}, {p2}, p, cfg, ForwardMode{});
  EXPECT_LT(max_abs_diff(slice(both, 0, 0, 2).data(), a.data()), 1e-12);
  EXPECT_LT(max_abs_diff(slice(both, 0, 2, 6).data(), b.data()), 1e-12);
  EXPECT_THROW(decoder_forward(z1, {5}, {{kBos, 99}}, p, cfg, ForwardMode{}), DimensionError);
  EXPECT_THROW(decoder_forward(z1, {5}, {std::vector<std::size_t>(13, 3)}, p, cfg, ForwardMode{}), DimensionError);
}

TEST(Decoder, CrossEntropyIgnoresPadAndMatchesOracle) {
  Rng rng(7);
  auto logits = randn({4, 5}, rng);
  const std::vector<std::size_t> tgt{3, kPad, 4, kEos};
  double want = 0;
  for (std::size_t r : {0u, 2u, 3u}) {
    double mx = -1e300, s = 0;
    for (std::size_t v = 0; v < 5; ++v) mx = std::max(mx, logits.at(r, v));
    for (std::size_t v = 0; v < 5; ++v) s += std::exp(logits.at(r, v) - mx);
    want += -(logits.at(r, tgt[r]) - mx - std::log(s)) / 3.0;
  }
  EXPECT_NEAR(ce_loss(logits, tgt).item(), want, 1e-12);
}

TEST(Decoder, GradientCheck) {
  const auto cfg = tiny_decoder();
  auto p = decoder_params(cfg, 8);
  Rng rng(9);
  auto z = randn({6, 8}, rng, 1.0, true);
  std::vector<NamedLeaf> leaves{{"z", z}};
  for (auto& e : p.entries()) leaves.push_back({e.name, e.value});
  auto r = grad_check(
      [&] {
        auto logits = decoder_forward(z, {2, 4}, {{kBos, 3}, {kBos, 4, 5}}, p, cfg, ForwardMode{});
        return ce_loss(logits, {3, kEos, 4, 5, kEos});
      },
      leaves);
  EXPECT_FALSE(r.non_finite);
  for (const auto& e : r.entries) EXPECT_LT(e.rel_error, 1e-6) << e.name;
}

TEST(Decoding, BeamOneEqualsGreedyOnRandomModels) {
  const auto cfg = tiny_decoder();
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto p = decoder_params(cfg, 100 + s);
    Rng rng(200 + s);
    auto z = randn({6, 8}, rng);
    auto scorer = model_scorer(z, p, cfg);
    const auto g = greedy_decode(scorer, 10);
    const auto b = beam_decode(scorer, {1, 10, true, kEos});
    EXPECT_EQ(g.tokens, b.tokens) << s;
    EXPECT_NEAR(g.log_prob, b.log_prob, 1e-12);
  }
}

TEST(Decoding, BeamRecoversExhaustiveOptimumOnTrapLattices) {
  Rng rng(11);
  int greedy_misses = 0;
  for (int i = 0; i < 100; ++i) {
    const auto L = avd2v::testing::TrapLattice::draw(rng);
    const auto [best, best_lp] = L.best_path();
    const auto beam = beam_decode(L.scorer(), avd2v::testing::lattice_beam(2, L.vocab));
    EXPECT_EQ(beam.tokens, best) << i;
    EXPECT_NEAR(beam.log_prob, best_lp, 1e-12);
    if (greedy_decode(L.scorer(), 3, L.vocab).tokens != best) ++greedy_misses;
  }
  EXPECT_EQ(greedy_misses, 100);
}

TEST(Decoding, BeamStopsOnEndSymbol) {
  // EOS dominates after one symbol.
  StepScorer s = [](const std::vector<std::vector<std::size_t>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::vector<double> row(5, std::log(0.1));
      if (p.empty())
        row[4] = std::log(0.6);
      else
        row[kEos] = std::log(0.6);
      out.push_back(row);
    }
    return out;
  };
  const auto h = beam_decode(s, {3, 10, true, kEos});
  EXPECT_TRUE(h.finished);
  EXPECT_EQ(h.tokens, (std::vector<std::size_t>{4, kEos}));
  EXPECT_THROW(beam_decode(s, {0, 10, true, kEos}), ConfigError);
}

TEST(Schedules, TriStageAndCosineShapes) {
  EXPECT_NEAR(tri_stage_lr(0, 10, 5, 30, 1.0, 0.01, 0.05), 0.01, 1e-12);
  EXPECT_NEAR(tri_stage_lr(10, 10, 5, 30, 1.0, 0.01, 0.05), 1.0, 1e-12);
  EXPECT_NEAR(tri_stage_lr(14, 10, 5, 30, 1.0, 0.01, 0.05), 1.0, 1e-12);
  EXPECT_NEAR(tri_stage_lr(30, 10, 5, 30, 1.0, 0.01, 0.05), 0.05, 1e-12);
  EXPECT_NEAR(cosine_lr(10, 10, 30, 2.0), 2.0, 1e-12);
  EXPECT_NEAR(cosine_lr(20, 10, 30, 2.0), 1.0, 1e-12);
  EXPECT_NEAR(cosine_lr(30, 10, 30, 2.0), 0.0, 1e-12);
}

class TinyFinetune : public ::testing::Test {
 protected:
  void SetUp() override {
    rc = avd2v::testing::tiny_resolved();
    corpus = avd2v::testing::tiny_corpus(rc.corpus);
  }
  ResolvedConfig rc;
  Corpus corpus;
};

TEST_F(TinyFinetune, FrozenEncoderStaysBitIdenticalWhileDecoderMoves) {
  auto fc = rc.finetune;
  fc.task = Task::AVSR;
  fc.freeze_steps = 3;
  auto s = init_finetune_state<float>(fc, 1, nullptr);
  const auto before = s.student.clone();
  const auto batch = load_batch(corpus, {0, 1}, rc.batch_frames);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(finetune_step(batch, s, fc).encoder_frozen);
  for (const auto& e : s.student.entries()) {
    const auto a = e.value.data();
    const auto b = before[e.name].data();
    const bool same = std::equal(a.begin(), a.end(), b.begin());
    if (is_decoder_param(e.name))
      EXPECT_FALSE(same) << e.name;
    else
      EXPECT_TRUE(same) << e.name;
  }
  EXPECT_FALSE(finetune_step(batch, s, fc).encoder_frozen);
  EXPECT_FALSE(s.student.bit_equal(before, "enc."));
}

TEST_F(TinyFinetune, OverfitsFourUtterances) {
  auto fc = rc.finetune;
  fc.task = Task::ASR;
  fc.updates = 200;
  fc.warmup = 20;
  fc.lr = 3e-3;
  fc.model.encoder.dropout = 0.0;
  fc.decoder.dropout = 0.0;
  auto s = init_finetune_state<float>(fc, 2, nullptr);
  const auto batch = load_batch(corpus, {0, 1}, rc.batch_frames);
  const auto batch2 = load_batch(corpus, {2, 3}, rc.batch_frames);
  double acc = 0;
  for (std::size_t i = 0; i < fc.updates; ++i) {
    finetune_step(i % 2 ? batch2 : batch, s, fc);
  }
  acc = 0.5 * (finetune_step(batch, s, fc).token_accuracy + finetune_step(batch2, s, fc).token_accuracy);
  EXPECT_GT(acc, 0.95);
}

TEST_F(TinyFinetune, PretrainedEncoderIsCopiedAndShapesChecked) {
  auto pc = rc.pretrain;
  auto pre = init_pretrain_state<float>(pc, 3);
  auto s = init_finetune_state<float>(rc.finetune, 4, &pre.student);
  for (const auto& e : pre.student.entries())
    EXPECT_TRUE(std::equal(e.value.data().begin(), e.value.data().end(), s.student[e.name].data().begin())) << e.name;
  auto other = rc.finetune;
  other.model.encoder.ffn_dim = 48;
  EXPECT_THROW(init_finetune_state<float>(other, 4, &pre.student), ConfigError);
}

}  // namespace
