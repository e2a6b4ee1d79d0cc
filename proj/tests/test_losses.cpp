#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "splitexpand/backward.hpp"
#include "splitexpand/model_io.hpp"
#include "fd_support.hpp"
#include "test_support.hpp"

namespace se = splitexpand;
using se::testing::random_image;
using se::testing::tiny_model;
using se::testing::finite_difference_check;
using se::testing::norm;
using se::testing::random_label_set;
using se::testing::random_labels;

namespace {

se::Tensor<double> probs(int h, int w, double p_cell) {
  se::Tensor<double> t({1, 2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      t.at(0, 0, y, x) = 1.0 - p_cell;
      t.at(0, 1, y, x) = p_cell;
    }
  return t;
}

}  // namespace

TEST(MaskedCrossEntropy, PerfectPredictionIsZero) {
  auto label = random_labels(4, 5, 1);
  se::Tensor<double> p({1, 2, 4, 5});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      const int c = label.at(y, x) == se::kLabelCell ? 1 : 0;
      p.at(0, c, y, x) = 1.0;
    }
  EXPECT_LE(se::masked_cross_entropy(p, label), 1e-6);
}

TEST(MaskedCrossEntropy, UniformIsLn2) {
  EXPECT_NEAR(se::masked_cross_entropy(probs(3, 3, 0.5), random_labels(3, 3, 2)), std::log(2.0), 1e-12);
}

TEST(MaskedCrossEntropy, IgnorePixelExcluded) {
  se::LabelMap l(1, 2, se::kLabelCell);
  l.at(0, 1) = se::kLabelIgnore;
  auto p = probs(1, 2, 0.8);
  p.at(0, 1, 0, 1) = 0.01;
  p.at(0, 0, 0, 1) = 0.99;
  EXPECT_NEAR(se::masked_cross_entropy(p, l), 0.2231435513, 1e-9);
}

TEST(MaskedCrossEntropy, AllIgnoreIsExactlyZero) {
  EXPECT_EQ(se::masked_cross_entropy(probs(3, 3, 0.3), se::LabelMap(3, 3, se::kLabelIgnore)), 0.0);
}

TEST(MaskedCrossEntropy, ShapeMismatchThrows) {
  EXPECT_THROW(se::masked_cross_entropy(probs(3, 3, 0.3), se::LabelMap(3, 4, 0)), se::ShapeError);
}

TEST(FrwReweight, ZeroRelevanceIsIdentity) {
  se::Tensor<double> f({1, 2, 2, 2}, std::vector<double>{1, -2, 3, 4, 5, 6, -7, 8});
  EXPECT_EQ(se::frw_reweight(f, se::Tensor<double>(f.dims())), f);
}

TEST(FrwReweight, HandEvaluated) {
  se::Tensor<double> f({2}, std::vector<double>{2, 2});
  se::Tensor<double> r({2}, std::vector<double>{3, -3});
  auto w = se::frw_weights(r);
  EXPECT_DOUBLE_EQ(w[0], 2.0);
  EXPECT_DOUBLE_EQ(w[1], 0.0);
  auto out = se::frw_reweight(f, r);
  EXPECT_DOUBLE_EQ(out[0], 4.0);
  EXPECT_DOUBLE_EQ(out[1], 0.0);
}

TEST(FrwReweight, WeightsBoundedAndOrdered) {
  se::Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    se::Tensor<double> r({1, 3, 5, 5});
    for (auto& v : r.values()) v = rng.normal() * std::pow(10.0, rng.uniform(-3, 3));
    auto w = se::frw_weights(r);
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_GE(w[i], 0.0);
      EXPECT_LE(w[i], 2.0);
      if (r[i] > 0) {
        EXPECT_GT(w[i], 1.0);
      }
      if (r[i] < 0) {
        EXPECT_LT(w[i], 1.0);
      }
    }
  }
}

TEST(FrwReweight, ScaleInvariant) {
  se::Rng rng(4);
  se::Tensor<double> r({1, 2, 3, 3});
  for (auto& v : r.values()) v = rng.normal();
  auto r2 = r;
  for (auto& v : r2.values()) v *= 2.0;
  auto a = se::frw_weights(r), b = se::frw_weights(r2);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(FrwLoss, ZeroRelevanceReducesToPointCrossEntropy) {
  auto m = tiny_model<float>(3);
  // CC class-1 scores strongly negative everywhere: no confident pixels, and the
  // fallback GT_P pixels carry zero relevance.
  m.weight("cc.conv.w").fill(0.0f);
  m.weight("cc.conv.b")[1] = -30.0f;
  const auto img = random_image<float>(16, 16, 5);
  const auto gt_p = random_labels(16, 16, 6, 0.0);
  se::FrwConfig cfg{true, "enc1", 0.1};
  const float frw = se::frw_loss(m, img, gt_p, cfg);
  const float ce = se::masked_cross_entropy(se::forward(m, img).y_cc, gt_p);
  EXPECT_EQ(frw, ce);
}

TEST(FrwLoss, DoublingInitialRelevanceLeavesLossUnchanged) {
  auto m = tiny_model<double>(8);
  const auto img = random_image<double>(16, 16, 2);
  const auto gt_p = random_labels(16, 16, 3, 0.0);
  const auto fwd = se::forward(m, img);
  const auto layer = se::feature_layer(m, "enc1");
  auto target = se::frw_target(fwd.y_cc, gt_p, 0.1);
  ASSERT_FALSE(target.pixels.empty());
  auto init = se::init_relevance(m, fwd.trace, target);
  auto init2 = init;
  for (auto& v : init2.values()) v *= 2.0;
  auto r1 = se::propagate_relevance(m, fwd.trace, init, se::Head::cc, layer);
  auto r2 = se::propagate_relevance(m, fwd.trace, init2, se::Head::cc, layer);
  ASSERT_GT(r1.max_abs(), 0.0);
  const double a = se::frw_pass_with_weights(m, fwd.trace, layer, se::frw_weights(r1), gt_p).loss;
  const double b = se::frw_pass_with_weights(m, fwd.trace, layer, se::frw_weights(r2), gt_p).loss;
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(FrwLoss, UnknownLayerThrows) {
  auto m = tiny_model<float>(3);
  se::FrwConfig cfg{true, "enc3", 0.1};  // depth-2 model has no enc3
  EXPECT_THROW(se::frw_loss(m, random_image<float>(16, 16, 1), random_labels(16, 16, 1), cfg), se::ConfigError);
  cfg.layer = "cc.relu1";
  EXPECT_THROW(se::frw_loss(m, random_image<float>(16, 16, 1), random_labels(16, 16, 1), cfg), se::ConfigError);
}

TEST(FrwLoss, MatchesScriptedGolden) {
  // Values produced by tests/oracle/frw_oracle.py from the stored model/input.
  const std::string dir = std::string(SPLITEXPAND_TEST_DATA) + "/frw_golden";
  std::ifstream in(dir + "/expected.txt");
  ASSERT_TRUE(in) << "missing " << dir << "/expected.txt";
  const auto m = se::load_model(dir + "/model").cast<double>();
  const auto img = se::setn::load(dir + "/image.setn").cast<double>();
  const auto gt = se::setn::load(dir + "/gt_p.setn");
  se::LabelMap gt_p(gt.dim(0), gt.dim(1), 0);
  for (std::size_t i = 0; i < gt.size(); ++i) gt_p.codes[i] = static_cast<std::uint8_t>(gt[i]);
  std::string layer;
  double expected_ce = 0, expected_frw = 0;
  int lines = 0;
  while (in >> layer >> expected_ce >> expected_frw) {
    ++lines;
    EXPECT_NEAR(se::masked_cross_entropy(se::forward(m, img).y_cc, gt_p), expected_ce, 1e-9);
    EXPECT_NEAR(se::frw_loss(m, img, gt_p, se::FrwConfig{true, layer, 0.1}), expected_frw, 1e-9) << layer;
  }
  EXPECT_EQ(lines, 2);
}

TEST(TotalLosses, ZeroWeightsGiveZero) {
  auto m = tiny_model<float>(1);
  auto labels = random_label_set(16, 16, 3);
  auto b = se::total_losses(m, random_image<float>(16, 16, 1), labels, se::LossWeights{0, 0, 0, 0},
                            se::FrwConfig{true, "enc1", 0.1});
  EXPECT_EQ(b.loss_seg, 0.0f);
  EXPECT_EQ(b.loss_cc, 0.0f);
}

TEST(TotalLosses, FrwDisabledIsPointTermOnly) {
  auto m = tiny_model<double>(1);
  auto labels = random_label_set(16, 16, 3);
  const auto img = random_image<double>(16, 16, 1);
  const auto w = se::LossWeights::defaults(false);
  EXPECT_EQ(w.alpha_p, 200.0);
  auto b = se::total_losses(m, img, labels, w, se::FrwConfig{});
  EXPECT_EQ(b.loss_cc, 200.0 * se::masked_cross_entropy(se::forward(m, img).y_cc, labels.point));
  const auto y = se::forward(m, img).y_seg;
  EXPECT_DOUBLE_EQ(b.loss_seg,
                   50.0 * se::masked_cross_entropy(y, labels.voronoi) + 50.0 * se::masked_cross_entropy(y, labels.cluster));
  EXPECT_GE(b.loss_seg, 0.0);
  EXPECT_GE(b.loss_cc, 0.0);
}

TEST(TotalLosses, DefaultsWithFrw) {
  auto m = tiny_model<double>(1);
  auto labels = random_label_set(16, 16, 3);
  const auto img = random_image<double>(16, 16, 1);
  const auto w = se::LossWeights::defaults(true);
  EXPECT_EQ(w.alpha_v, 50.0);
  EXPECT_EQ(w.alpha_c, 50.0);
  EXPECT_EQ(w.alpha_p, 100.0);
  EXPECT_EQ(w.alpha_frw, 100.0);
  const se::FrwConfig cfg{true, "bottleneck", 0.1};
  auto b = se::total_losses(m, img, labels, w, cfg);
  const double ce = se::masked_cross_entropy(se::forward(m, img).y_cc, labels.point);
  const double frw = se::frw_loss(m, img, labels.point, cfg);
  EXPECT_DOUBLE_EQ(b.loss_cc, 100.0 * ce + 100.0 * frw);
}

// --- gradients ---------------------------------------------------------------


TEST(Backward, ZeroLossWeightsGiveZeroGradients) {
  auto m = tiny_model<double>(2);
  auto r = se::loss_and_gradients(m, random_image<double>(8, 8, 1), random_label_set(8, 8, 1), se::LossWeights{0, 0, 0, 0},
                                  se::FrwConfig{true, "enc1", 0.1});
  EXPECT_FALSE(r.grads.empty());
  for (const auto& [name, g] : r.grads) EXPECT_EQ(g.max_abs(), 0.0) << name;
}

TEST(Backward, FrozenLayerAbsentFromGradients) {
  auto m = tiny_model<double>(2);
  se::BackwardOptions opts;
  opts.frozen_layers = {"enc1.conv1", "enc1.bn1"};
  auto r = se::loss_and_gradients(m, random_image<double>(8, 8, 1), random_label_set(8, 8, 1),
                                  se::LossWeights::defaults(false), se::FrwConfig{}, opts);
  EXPECT_EQ(r.grads.count("enc1.conv1.w"), 0u);
  EXPECT_EQ(r.grads.count("enc1.bn1.gamma"), 0u);
  EXPECT_EQ(r.grads.count("enc1.conv2.w"), 1u);
  EXPECT_EQ(r.grads.count("enc1.bn1.running_mean"), 0u);
}

TEST(Backward, MatchesFiniteDifferencesTrainingMode) {
  auto m = tiny_model<double>(21);
  const auto img = random_image<double>(8, 8, 4);
  const auto rep = finite_difference_check(m, img, random_label_set(8, 8, 5), se::LossWeights::defaults(false),
                                           se::FrwConfig{}, se::BnMode::training);
  EXPECT_LT(rep.worst, 1e-5) << rep.worst_name;
}

TEST(Backward, MatchesFiniteDifferencesWithFrw) {
  for (const char* layer : {"enc1", "bottleneck"}) {
    auto m = tiny_model<double>(22);
    const auto img = random_image<double>(8, 8, 6);
    const auto rep = finite_difference_check(m, img, random_label_set(8, 8, 7), se::LossWeights::defaults(true),
                                             se::FrwConfig{true, layer, 0.1}, se::BnMode::training);
    EXPECT_LT(rep.worst, 1e-5) << layer << " " << rep.worst_name;
  }
}

TEST(Backward, MatchesFiniteDifferencesInferenceMode) {
  auto m = tiny_model<double>(23);
  const auto rep = finite_difference_check(m, random_image<double>(8, 8, 8), random_label_set(8, 8, 9),
                                           se::LossWeights::defaults(true), se::FrwConfig{true, "enc1", 0.1},
                                           se::BnMode::inference);
  EXPECT_LT(rep.worst, 1e-5) << rep.worst_name;
}
