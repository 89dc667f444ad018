#include <gtest/gtest.h>

#include "avd2v/conv.hpp"
#include "avd2v/frontends.hpp"
#include "test_util.hpp"

using namespace avd2v;
using avd2v::testing::Projector;
using avd2v::testing::randn;

namespace {

// Direct six-deep loop over output and kernel coordinates.
std::vector<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                                 Dims3 s, Dims3 pad, Shape& out_shape) {
  const auto C = x.dim(0), Ti = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const auto O = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const auto To = (Ti + 2 * pad[0] - kt) / s[0] + 1, Ho = (Hi + 2 * pad[1] - kh) / s[1] + 1,
             Wo = (Wi + 2 * pad[2] - kw) / s[2] + 1;
  out_shape = {O, To, Ho, Wo};
  std::vector<double> y(O * To * Ho * Wo, 0.0);
  auto X = [&](std::size_t c, long t, long h, long ww) -> double {
    if (t < 0 || h < 0 || ww < 0 || t >= long(Ti) || h >= long(Hi) || ww >= long(Wi)) return 0.0;
    return x.data()[((c * Ti + t) * Hi + h) * Wi + ww];
  };
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t ww = 0; ww < Wo; ++ww) {
          double acc = bias.defined() ? bias.data()[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < kt; ++a)
              for (std::size_t b = 0; b < kh; ++b)
                for (std::size_t d = 0; d < kw; ++d)
                  acc += w.data()[(((o * C + c) * kt + a) * kh + b) * kw + d] *
                         X(c, long(t * s[0] + a) - long(pad[0]), long(h * s[1] + b) - long(pad[1]),
                           long(ww * s[2] + d) - long(pad[2]));
          y[((o * To + t) * Ho + h) * Wo + ww] = acc;
        }
  return y;
}

TEST(Conv3d, MatchesDirectConvolution) {
  Rng rng(1);
  struct Case {
    Shape x, w;
    Dims3 stride, pad;
  };
  for (const auto& c : {Case{{1, 5, 7, 7}, {3, 1, 3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
                        Case{{2, 4, 9, 8}, {2, 2, 1, 3, 3}, {1, 2, 2}, {0, 1, 1}},
                        Case{{1, 6, 11, 11}, {4, 1, 5, 7, 7}, {1, 2, 2}, {2, 3, 3}}}) {
    auto x = randn(c.x, rng), w = randn(c.w, rng), b = randn({c.w[0]}, rng);
    Shape ref_shape;
    const auto ref = naive_conv3d(x, w, b, c.stride, c.pad, ref_shape);
    auto y = conv3d(x, w, b, c.stride, c.pad);
    ASSERT_EQ(y.shape(), ref_shape);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y.data()[i], ref[i], 1e-10);
  }
}

TEST(Conv3d, RejectsChannelMismatchAndTinyInputs) {
  auto x = Tensor<double>::zeros({2, 3, 4, 4});
  EXPECT_THROW(conv3d(x, Tensor<double>::zeros({1, 3, 1, 1, 1}), Tensor<double>(), {1, 1, 1}, {0, 0, 0}),
               DimensionError);
  EXPECT_THROW(conv3d(x, Tensor<double>::zeros({1, 2, 5, 1, 1}), Tensor<double>(), {1, 1, 1}, {0, 0, 0}),
               DimensionError);
}

TEST(Conv3d, GradientsMatchFiniteDifferences) {
  Rng rng(2);
  auto x = randn({2, 4, 6, 5}, rng), w = randn({3, 2, 3, 3, 3}, rng), b = randn({3}, rng);
  Projector P(3);
  auto r = grad_check([&] { return P(conv3d(x, w, b, {1, 2, 2}, {1, 1, 1})); }, {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_TRUE(r.passed()) << r.max_rel_error();
  EXPECT_LT(r.max_rel_error(), 1e-6);
}

TEST(BatchNorm, TrainingStandardizesChannelsAndUpdatesRunningStats) {
  Rng rng(4);
  auto x = randn({3, 2, 4, 4}, rng, 2.0);
  for (auto& v : x.mutable_data()) v += 5.0;
  auto g = Tensor<double>::full({3}, 1.0), b = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3}), rv = Tensor<double>::full({3}, 1.0);
  auto y = batch_norm(x, g, b, rm, rv, true);
  const std::size_t n = 32;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0, xm = 0;
    for (std::size_t i = 0; i < n; ++i) {
      m += y.data()[c * n + i] / n;
      xm += x.data()[c * n + i] / n;
    }
    for (std::size_t i = 0; i < n; ++i) v += std::pow(y.data()[c * n + i] - m, 2) / n;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
    EXPECT_NEAR(rm.data()[c], 0.1 * xm, 1e-12);
  }
  // Eval mode reads the running buffers and leaves them alone.
  const std::vector<double> saved(rm.data().begin(), rm.data().end());
  auto e = batch_norm(x, g, b, rm, rv, false);
  EXPECT_TRUE(std::equal(saved.begin(), saved.end(), rm.data().begin()));
  EXPECT_NEAR(e.data()[0], (x.data()[0] - rm.data()[0]) / std::sqrt(rv.data()[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  auto x = randn({2, 2, 3, 3}, rng), g = randn({2}, rng), b = randn({2}, rng);
  auto rm = Tensor<double>::zeros({2}), rv = Tensor<double>::full({2}, 1.0);
  Projector P(6);
  auto train = grad_check([&] { return P(batch_norm(x, g, b, rm, rv, true)); }, {{"x", x}, {"g", g}, {"b", b}});
  EXPECT_LT(train.max_rel_error(), 1e-6);
  auto eval = grad_check([&] { return P(batch_norm(x, g, b, rm, rv, false)); }, {{"x", x}, {"g", g}, {"b", b}});
  EXPECT_LT(eval.max_rel_error(), 1e-6);
}

TEST(Prelu, ForwardAndGradient) {
  auto x = Tensor<double>::from({2, 1, 1, 2}, {-2.0, 3.0, -1.0, 0.5});
  auto a = Tensor<double>::from({2}, {0.25, 0.1});
  auto y = prelu(x, a);
  EXPECT_DOUBLE_EQ(y.data()[0], -0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 3.0);
  EXPECT_DOUBLE_EQ(y.data()[2], -0.1);
  Projector P(7);
  EXPECT_LT(grad_check([&] { return P(prelu(x, a)); }, {{"x", x}, {"a", a}}).max_rel_error(), 1e-6);
}

TEST(MaxPool3d, PicksWindowMaximaAndRoutesGradient) {
  Rng rng(8);
  auto x = randn({2, 2, 6, 6}, rng);
  auto y = max_pool3d(x, {1, 3, 3}, {1, 2, 2}, {0, 1, 1});
  ASSERT_EQ(y.shape(), (Shape{2, 2, 3, 3}));
  // Output (c=1, t=1, h=1, w=2) covers rows 1..3 and cols 3..5.
  double m = -1e9;
  for (std::size_t h = 1; h <= 3; ++h)
    for (std::size_t w = 3; w <= 5; ++w) m = std::max(m, x.data()[((1 * 2 + 1) * 6 + h) * 6 + w]);
  EXPECT_EQ(y.data()[((1 * 2 + 1) * 3 + 1) * 3 + 2], m);
  Projector P(9);
  EXPECT_LT(grad_check([&] { return P(max_pool3d(x, {1, 3, 3}, {1, 2, 2}, {0, 1, 1})); }, {{"x", x}})
                .max_rel_error(),
            1e-6);
}

TEST(SpatialAvgPool, AveragesEachFrame) {
  Rng rng(10);
  auto x = randn({3, 2, 2, 2}, rng);
  auto y = spatial_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 2; ++t) {
      double m = 0;
      for (std::size_t i = 0; i < 4; ++i) m += x.data()[(c * 2 + t) * 4 + i] / 4;
      EXPECT_NEAR(y.at(t, c), m, 1e-12);
    }
  Projector P(11);
  EXPECT_LT(grad_check([&] { return P(spatial_avg_pool(x)); }, {{"x", x}}).max_rel_error(), 1e-6);
}

// ---------------------------------------------------------------------------
// Frontends

TEST(Frontends, StackAudioConcatenatesAndPadsTail) {
  AudioFrames<double> a;
  a.frames = 5;
  a.dims = 2;
  a.values = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto s = stack_audio(a, 2);
  EXPECT_EQ(s.frames, 3u);
  EXPECT_EQ(s.dims, 4u);
  EXPECT_EQ(s.values, (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0, 0}));
}

TEST(Frontends, NormalizeAudioStandardizesEachDimension) {
  Rng rng(12);
  AudioFrames<double> a;
  a.frames = 50;
  a.dims = 3;
  for (std::size_t i = 0; i < 150; ++i) a.values.push_back(rng.normal(double(i % 3), 1.0 + double(i % 3)));
  auto n = normalize_audio(a);
  for (std::size_t d = 0; d < 3; ++d) {
    double m = 0, v = 0;
    for (std::size_t t = 0; t < 50; ++t) m += n.values[t * 3 + d] / 50;
    for (std::size_t t = 0; t < 50; ++t) v += std::pow(n.values[t * 3 + d] - m, 2) / 50;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

FrontendConfig tiny_frontend() {
  FrontendConfig f;
  f.dim = 8;
  f.audio_stack = 2;
  f.audio_in_dim = 6;
  f.video_channels = {2, 3, 4, 4};
  f.video_blocks_per_stage = 1;
  f.video_side = 12;
  f.stem_kernel = {3, 5, 5};
  return f;
}

TEST(Frontends, VideoEncoderKeepsFrameCountPerClip) {
  Rng rng(13);
  auto cfg = tiny_frontend();
  ParamStore<double> p;
  init_video_frontend(p, cfg, rng);
  auto a = randn({1, 5, 12, 12}, rng), b = randn({1, 3, 12, 12}, rng);
  auto m = video_encode<double>({a, b}, p, cfg, false);
  EXPECT_EQ(m.shape(), (Shape{8, 8}));
  // The stem never mixes clips: encoding b alone gives the same rows.
  auto mb = video_encode(b, p, cfg, false);
  for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_NEAR(m.data()[5 * 8 + i], mb.data()[i], 1e-12);
}

TEST(Frontends, AudioEncoderIsOneAffineMapPerFrame) {
  Rng rng(14);
  auto cfg = tiny_frontend();
  ParamStore<double> p;
  init_audio_frontend(p, cfg, rng);
  auto x = randn({4, 6}, rng);
  auto m = audio_encode(x, p);
  ASSERT_EQ(m.shape(), (Shape{4, 8}));
  auto row = audio_encode(slice(x, 0, 2, 3), p);
  for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(m.at(2, d), row.at(0, d), 1e-12);
}

TEST(Frontends, VideoEncoderGradientCheck) {
  Rng rng(15);
  auto cfg = tiny_frontend();
  ParamStore<double> p;
  init_video_frontend(p, cfg, rng);
  // Nonzero shifts keep all-zero receptive fields off the relu kink.
  for (auto& e : p.entries())
    if (e.name.ends_with(".beta"))
      for (auto& v : e.value.mutable_data()) v = rng.normal(0.0, 0.5);
  auto clip = randn({1, 4, 12, 12}, rng);
  Projector P(16);
  std::vector<NamedLeaf> leaves{{"clip", clip}};
  for (auto& e : p.entries())
    if (e.trainable) leaves.push_back({e.name, e.value});
  auto r = grad_check([&] { return P(video_encode(clip, p, cfg, false)); }, leaves, 1e-4, 1e-5, 24);
  EXPECT_FALSE(r.non_finite);
  for (const auto& e : r.entries) {
    EXPECT_LT(e.rel_error, 1e-4) << e.name;
  }
}

}  // namespace
