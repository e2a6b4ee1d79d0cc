#include <gtest/gtest.h>

#include "splitexpand/lrp.hpp"
#include "test_support.hpp"

namespace sx = splitexpand;
using sx::LayerKind;
using sx::LayerSpec;
using sx::Tensor;

namespace {

sx::OutputTarget cc_target(std::vector<std::pair<int, int>> px) { return {sx::Head::cc, std::move(px), 1}; }

// Sets the cc logits in a trace directly so initialization can be checked in
// isolation from the rest of the network.
sx::ActivationTrace<double> trace_with_cc_logits(const sx::NetworkModel<double>& m, Tensor<double> logits) {
  auto r = sx::forward(m, Tensor<double>({1, 3, 4, 4}, 0.5));
  r.trace.outputs[m.cc_logits()] = std::move(logits);
  return r.trace;
}

// All pixels whose positive cc probability is the larger one; guarantees a
// non-trivial explanation target on random nets.
sx::OutputTarget positive_cc_pixels(const sx::NetworkModel<double>& m, const sx::ActivationTrace<double>& tr) {
  const auto& z = tr.output(m.cc_logits());
  sx::OutputTarget t{sx::Head::cc, {}, 1};
  for (int y = 0; y < z.height(); ++y)
    for (int x = 0; x < z.width(); ++x)
      if (z.at(0, 1, y, x) > 0) t.pixels.emplace_back(y, x);
  return t;
}

}  // namespace

TEST(InitRelevance, SinglePixelScore) {
  const auto m = sx::make_unet<double>(2, 4);
  Tensor<double> z({1, 2, 4, 4}, -1.0);
  z.at(0, 1, 0, 0) = 2.3;
  const auto tr = trace_with_cc_logits(m, z);
  const auto r = sx::init_relevance(m, tr, cc_target({{0, 0}}));
  EXPECT_EQ(r.sum(), 2.3);
  EXPECT_EQ(r.at(0, 1, 0, 0), 2.3);
}

TEST(InitRelevance, NegativeScoresClampToZero) {
  const auto m = sx::make_unet<double>(2, 4);
  const auto tr = trace_with_cc_logits(m, Tensor<double>({1, 2, 4, 4}, -0.7));
  const auto r = sx::init_relevance(m, tr, cc_target({{0, 0}, {2, 3}}));
  EXPECT_EQ(r.max_abs(), 0.0);
}

TEST(InitRelevance, SumsClampedScores) {
  const auto m = sx::make_unet<double>(2, 4);
  Tensor<double> z({1, 2, 4, 4}, 0.0);
  z.at(0, 1, 1, 1) = 1.0;
  z.at(0, 1, 3, 2) = 3.0;
  const auto tr = trace_with_cc_logits(m, z);
  EXPECT_EQ(sx::init_relevance(m, tr, cc_target({{1, 1}, {3, 2}})).sum(), 4.0);
}

TEST(InitRelevance, RejectsEmptyAndOutOfBoundsTargets) {
  const auto m = sx::make_unet<double>(2, 4);
  const auto tr = trace_with_cc_logits(m, Tensor<double>({1, 2, 4, 4}));
  EXPECT_THROW(sx::init_relevance(m, tr, cc_target({})), sx::ConfigError);
  EXPECT_THROW(sx::init_relevance(m, tr, cc_target({{4, 0}})), sx::ConfigError);
}

TEST(LrpLayer, PositiveContributionsSplitProportionally) {
  LayerSpec l{LayerKind::conv1x1, "fc", 2, 1};
  sx::WeightMap<double> w;
  w.emplace("fc.w", Tensor<double>({1, 2, 1, 1}, 1.0));
  w.emplace("fc.b", Tensor<double>({1}, 0.0));
  const Tensor<double> x({1, 2, 1, 1}, std::vector<double>{1.0, 3.0});
  const auto r = sx::lrp_alpha1_layer(l, x, Tensor<double>({1, 1, 1, 1}, 4.0), w);
  EXPECT_NEAR(r[0], 1.0, 1e-8);
  EXPECT_NEAR(r[1], 3.0, 1e-8);
}

TEST(LrpLayer, NoPositiveContributorDropsRelevance) {
  LayerSpec l{LayerKind::conv1x1, "fc", 2, 1};
  sx::WeightMap<double> w;
  w.emplace("fc.w", Tensor<double>({1, 2, 1, 1}, std::vector<double>{-1.0, 2.0}));
  w.emplace("fc.b", Tensor<double>({1}, 5.0));
  const Tensor<double> x({1, 2, 1, 1}, std::vector<double>{1.0, -3.0});
  const auto r = sx::lrp_alpha1_layer(l, x, Tensor<double>({1, 1, 1, 1}, 4.0), w);
  EXPECT_NEAR(r.sum(), 0.0, 1e-12);
}

TEST(LrpLayer, MaxPoolWinnerTakesAll) {
  LayerSpec l{LayerKind::maxpool2x2, "pool", 1, 1};
  const Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0.1, 0.9, 0.3, 0.2});
  const auto r = sx::lrp_alpha1_layer(l, x, Tensor<double>({1, 1, 1, 1}, 5.0), {});
  EXPECT_EQ(r.values(), (std::vector<double>{0, 5, 0, 0}));
}

TEST(LrpLayer, IdentityConvPassesRelevanceThrough) {
  LayerSpec l{LayerKind::conv3x3, "id", 1, 1};
  sx::WeightMap<double> w;
  w.emplace("id.w", Tensor<double>({1, 1, 3, 3}));
  w.emplace("id.b", Tensor<double>({1}));
  w.at("id.w").at(0, 0, 1, 1) = 1.0;
  const auto x = sx::testing::random_image<double>(6, 6, 2);
  Tensor<double> x1({1, 1, 6, 6});
  std::copy_n(x.data().begin(), 36, x1.data().begin());
  const auto rout = sx::testing::random_image<double>(6, 6, 3);
  Tensor<double> r1({1, 1, 6, 6});
  std::copy_n(rout.data().begin(), 36, r1.data().begin());
  const auto r = sx::lrp_alpha1_layer(l, x1, r1, w);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], r1[i], 1e-7);
}

TEST(LrpLayer, SoftmaxHasNoRule) {
  LayerSpec l{LayerKind::softmax_channel, "s", 2, 2};
  EXPECT_THROW(sx::lrp_alpha1_layer(l, Tensor<double>({1, 2, 1, 1}), Tensor<double>({1, 2, 1, 1}), {}),
               sx::ConfigError);
}

// On zero-bias nets relevance is conserved except at outputs with no positive
// contributor; the amount lost there is reported separately.
TEST(Explain, ConservesRelevanceUpToDeadOutputs) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = sx::testing::tiny_model<double>(seed, 2, 4, {.zero_bias = true});
    const auto fr = sx::forward(m, sx::testing::random_image<double>(16, 16, seed + 50));
    const auto target = positive_cc_pixels(m, fr.trace);
    ASSERT_FALSE(target.pixels.empty());
    const auto init = sx::init_relevance(m, fr.trace, target);
    double dropped = 0.0;
    const auto rin = sx::propagate_relevance(m, fr.trace, init, sx::Head::cc, std::nullopt, &dropped);
    EXPECT_LT(std::abs(rin.sum() + dropped - init.sum()) / init.sum(), 1e-3) << "seed " << seed;
    EXPECT_EQ(rin.dims(), (std::vector<int>{1, 3, 16, 16}));
  }
}

// Non-negative transposed-conv weights keep every upsampled activation with
// relevance positively supported, so nothing is dropped.
TEST(Explain, ConservesRelevanceWithoutDeadOutputs) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = sx::testing::tiny_model<double>(seed, 2, 4, {.zero_bias = true});
    for (const auto& l : m.layers) {
      if (l.kind != LayerKind::transposed_conv2x2) continue;
      for (auto& v : m.weight(l.name + ".w").values()) v = std::abs(v);
    }
    const auto fr = sx::forward(m, sx::testing::random_image<double>(16, 16, seed + 50));
    const auto target = positive_cc_pixels(m, fr.trace);
    ASSERT_FALSE(target.pixels.empty());
    const auto init = sx::init_relevance(m, fr.trace, target);
    double dropped = 0.0;
    const auto rin = sx::propagate_relevance(m, fr.trace, init, sx::Head::cc, std::nullopt, &dropped);
    EXPECT_EQ(dropped, 0.0);
    EXPECT_LT(std::abs(rin.sum() - init.sum()) / init.sum(), 1e-3) << "seed " << seed;
  }
}

TEST(Explain, NonNegativeAndScalesExactly) {
  const auto m = sx::testing::tiny_model<double>(4);
  const auto fr = sx::forward(m, sx::testing::random_image<double>(16, 16, 9));
  const auto target = positive_cc_pixels(m, fr.trace);
  const auto init = sx::init_relevance(m, fr.trace, target);
  Tensor<double> doubled = init;
  for (auto& v : doubled.values()) v *= 2.0;
  const auto a = sx::propagate_relevance(m, fr.trace, init, sx::Head::cc);
  const auto b = sx::propagate_relevance(m, fr.trace, doubled, sx::Head::cc);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_GE(a[i], 0.0);
    EXPECT_EQ(b[i], 2.0 * a[i]);
  }
}

TEST(Explain, StopLayerReturnsActivationShape) {
  const auto m = sx::testing::tiny_model<double>(1);
  const auto fr = sx::forward(m, sx::testing::random_image<double>(16, 16, 2));
  const auto t = cc_target({{5, 5}, {6, 6}});
  const auto r = sx::explain(m, fr.trace, t, std::string("bottleneck"));
  EXPECT_EQ(r.dims(), fr.trace.output(m.index_of("bottleneck.relu2")).dims());
  EXPECT_EQ(sx::explain(m, fr.trace, t, std::string("enc1")).dims(), (std::vector<int>{1, 4, 16, 16}));
  EXPECT_EQ(sx::explain(m, fr.trace, t).dims(), (std::vector<int>{16, 16}));
}

TEST(Explain, SegTargetCannotStopInCcHead) {
  const auto m = sx::testing::tiny_model<double>(1);
  const auto fr = sx::forward(m, sx::testing::random_image<double>(8, 8, 2));
  const sx::OutputTarget seg{sx::Head::seg, {{1, 1}}, 1};
  EXPECT_THROW(sx::explain(m, fr.trace, seg, std::string("cc.relu1")), sx::ConfigError);
  EXPECT_NO_THROW(sx::explain(m, fr.trace, cc_target({{1, 1}}), std::string("cc.relu1")));
}

TEST(Explain, InputOutsideReceptiveFieldIsIrrelevant) {
  const auto m = sx::testing::tiny_model<double>(6);
  auto img = sx::testing::random_image<double>(64, 64, 3);
  const auto tr = sx::forward(m, img).trace;
  const auto target = cc_target({{3, 4}, {4, 4}});
  const auto before = sx::explain(m, tr, target);
  const auto rf = sx::testing::receptive_field(m, m.cc_logits(), {3, 4, 4, 4});
  ASSERT_LT(rf.r1, 63);
  ASSERT_LT(rf.c1, 63);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        if (y < rf.r0 || y > rf.r1 || x < rf.c0 || x > rf.c1) img.at(0, c, y, x) = 0.0;
  const auto after = sx::explain(m, sx::forward(m, img).trace, target);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-5);
}

TEST(Explain, BatchNormIsCanonizedIntoConv) {
  // one conv followed by BN with scale 2: relevance at the conv input is the
  // same as for an unnormalized conv with doubled weights.
  LayerSpec conv{LayerKind::conv1x1, "fc", 2, 1};
  sx::WeightMap<double> w;
  w.emplace("fc.w", Tensor<double>({1, 2, 1, 1}, std::vector<double>{1.0, -0.5}));
  w.emplace("fc.b", Tensor<double>({1}, 0.0));
  const Tensor<double> x({1, 2, 1, 1}, std::vector<double>{2.0, 1.0});
  const std::vector<double> scale{2.0};
  const auto r = sx::lrp_alpha1_layer(conv, x, Tensor<double>({1, 1, 1, 1}, 3.0), w, &scale);
  EXPECT_NEAR(r[0], 3.0, 1e-9);
  EXPECT_NEAR(r[1], 0.0, 1e-12);
}
