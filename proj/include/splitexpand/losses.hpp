#pragma once

// Masked cross-entropy, the feature re-weighting (FRW) loss and the two total
// losses of the two-head network.
//
//   loss_seg = a_V * CE(y_seg, GT_V) + a_C * CE(y_seg, GT_C)
//   loss_cc  = a_P * CE(y_cc,  GT_P) + a_FRW * L_FRW
//
// L_FRW explains the CC prediction down to a trunk feature map f, re-weights
// it with w = R / max|R| + 1, re-runs the network from there and scores the
// new CC output against GT_P.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "labels.hpp"
#include "lrp.hpp"
#include "network.hpp"

namespace splitexpand {

inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
void check_label_dims(const Tensor<T>& pred, const LabelMap& label) {
  if (pred.rank() != 4 || pred.batch() != 1 || pred.channels() != 2) {
    throw ShapeError("loss", "prediction must be 1x2xHxW, got " + dims_string(pred.dims()));
  }
  if (pred.height() != label.height || pred.width() != label.width) {
    throw ShapeError("loss", "label map " + std::to_string(label.height) + "x" + std::to_string(label.width) +
                                 " does not match prediction " + dims_string(pred.dims()));
  }
}

// Mean over non-ignore pixels of -log p(label); 0 when every pixel is ignore.
template <typename T>
T masked_cross_entropy(const Tensor<T>& pred, const LabelMap& label) {
  check_label_dims(pred, label);
  T sum{};
  std::size_t count = 0;
  for (int y = 0; y < label.height; ++y) {
    for (int x = 0; x < label.width; ++x) {
      const auto code = label.at(y, x);
      if (code == kLabelIgnore) continue;
      const T p = std::max(pred.at(0, code, y, x), static_cast<T>(kProbabilityClamp));
      sum -= std::log(p);
      ++count;
    }
  }
  return count ? sum / static_cast<T>(count) : T{0};
}

// d CE / d pred, scaled by `scale` and accumulated into `grad` (1x2xHxW).
template <typename T>
void masked_cross_entropy_grad(const Tensor<T>& pred, const LabelMap& label, T scale, Tensor<T>& grad) {
  check_label_dims(pred, label);
  const std::size_t count = label.codes.size() - label.count(kLabelIgnore);
  if (!count || scale == T{0}) return;
  if (grad.empty()) grad = Tensor<T>(pred.dims());
  for (int y = 0; y < label.height; ++y) {
    for (int x = 0; x < label.width; ++x) {
      const auto code = label.at(y, x);
      if (code == kLabelIgnore) continue;
      const T p = pred.at(0, code, y, x);
      if (p > static_cast<T>(kProbabilityClamp)) grad.at(0, code, y, x) -= scale / (static_cast<T>(count) * p);
    }
  }
}

// w = R / max|R| + 1, elementwise; all ones when R is zero.
template <typename T>
Tensor<T> frw_weights(const Tensor<T>& relevance) {
  Tensor<T> w(relevance.dims(), T{1});
  const T m = relevance.max_abs();
  if (m == T{0}) return w;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = relevance[i] / m + T{1};
  return w;
}

template <typename T>
Tensor<T> frw_reweight(const Tensor<T>& features, const Tensor<T>& relevance) {
  if (!features.same_dims(relevance)) {
    throw ShapeError("frw", "relevance " + dims_string(relevance.dims()) + " does not match features " +
                                dims_string(features.dims()));
  }
  const Tensor<T> w = frw_weights(relevance);
  Tensor<T> out(features.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] * features[i];
  return out;
}

struct LossWeights {
  double alpha_v = 50.0;
  double alpha_c = 50.0;
  double alpha_p = 200.0;
  double alpha_frw = 0.0;

  static LossWeights defaults(bool frw_enabled) {
    return frw_enabled ? LossWeights{50.0, 50.0, 100.0, 100.0} : LossWeights{50.0, 50.0, 200.0, 0.0};
  }
};

struct FrwConfig {
  bool enabled = false;
  std::string layer = "enc1";       // enc1, enc3, bottleneck or an exact layer name
  double target_confidence = 0.1;   // CC probability defining the explanation target
};

// Explanation target for FRW: pixels whose CC cell probability is at least
// `confidence`, falling back to GT_P cell pixels. Empty when neither exists.
template <typename T>
OutputTarget frw_target(const Tensor<T>& y_cc, const LabelMap& gt_p, double confidence) {
  OutputTarget t{Head::cc, {}, 1};
  for (int y = 0; y < y_cc.height(); ++y)
    for (int x = 0; x < y_cc.width(); ++x)
      if (y_cc.at(0, 1, y, x) >= static_cast<T>(confidence)) t.pixels.emplace_back(y, x);
  if (t.pixels.empty()) {
    for (int y = 0; y < gt_p.height; ++y)
      for (int x = 0; x < gt_p.width; ++x)
        if (gt_p.at(y, x) == kLabelCell) t.pixels.emplace_back(y, x);
  }
  return t;
}

// Everything the FRW branch computes: the re-weighted layer, the weights
// (treated as constants when differentiating) and the re-run forward pass.
template <typename T>
struct FrwPass {
  std::size_t layer = 0;
  Tensor<T> weights;
  ForwardResult<T> result;
  T loss{};
};

// Re-runs the network from `layer` with its output multiplied by fixed `w`.
template <typename T>
FrwPass<T> frw_pass_with_weights(const NetworkModel<T>& m, const ActivationTrace<T>& base, std::size_t layer,
                                 Tensor<T> w, const LabelMap& gt_p) {
  const Tensor<T>& f = base.output(layer);
  if (!w.same_dims(f)) throw ShapeError(m.layers[layer].name, "FRW weights do not match the feature map");
  Tensor<T> fw(f.dims());
  for (std::size_t i = 0; i < f.size(); ++i) fw[i] = w[i] * f[i];
  FrwPass<T> p{layer, std::move(w), forward_from(m, base, layer, std::move(fw)), T{}};
  p.loss = masked_cross_entropy(p.result.y_cc, gt_p);
  return p;
}

template <typename T>
Tensor<T> frw_relevance(const NetworkModel<T>& m, const ForwardResult<T>& fwd, std::size_t layer,
                        const LabelMap& gt_p, double confidence) {
  const OutputTarget target = frw_target(fwd.y_cc, gt_p, confidence);
  if (target.pixels.empty()) return Tensor<T>(fwd.trace.output(layer).dims());
  return propagate_relevance(m, fwd.trace, init_relevance(m, fwd.trace, target), Head::cc, layer);
}

// FRW branch from an existing forward pass.
template <typename T>
FrwPass<T> frw_pass(const NetworkModel<T>& m, const ForwardResult<T>& fwd, const LabelMap& gt_p,
                    const FrwConfig& cfg) {
  const auto layer = feature_layer(m, cfg.layer);
  if (m.layers[layer].section != Section::trunk) {
    throw ConfigError("FRW layer '" + cfg.layer + "' is not a trunk layer");
  }
  const Tensor<T> r = frw_relevance(m, fwd, layer, gt_p, cfg.target_confidence);
  return frw_pass_with_weights(m, fwd.trace, layer, frw_weights(r), gt_p);
}

template <typename T>
T frw_loss(const NetworkModel<T>& m, const Tensor<T>& image, const LabelMap& gt_p, const FrwConfig& cfg,
           BnMode mode = BnMode::inference) {
  return frw_pass(m, forward(m, image, mode), gt_p, cfg).loss;
}

struct LabelSet {
  LabelMap voronoi;  // GT_V
  LabelMap cluster;  // GT_C
  LabelMap point;    // GT_P
};

template <typename T>
struct LossBreakdown {
  T ce_v{}, ce_c{}, ce_p{}, frw{};
  T loss_seg{}, loss_cc{};
  T total() const { return loss_seg + loss_cc; }
};

template <typename T>
LossBreakdown<T> combine_losses(T ce_v, T ce_c, T ce_p, T frw, const LossWeights& w) {
  LossBreakdown<T> b{ce_v, ce_c, ce_p, frw, {}, {}};
  b.loss_seg = static_cast<T>(w.alpha_v) * ce_v + static_cast<T>(w.alpha_c) * ce_c;
  b.loss_cc = static_cast<T>(w.alpha_p) * ce_p + static_cast<T>(w.alpha_frw) * frw;
  return b;
}

template <typename T>
LossBreakdown<T> total_losses(const NetworkModel<T>& m, const Tensor<T>& image, const LabelSet& labels,
                              const LossWeights& weights, const FrwConfig& cfg, BnMode mode = BnMode::inference) {
  const auto fwd = forward(m, image, mode);
  const T frw = cfg.enabled ? frw_pass(m, fwd, labels.point, cfg).loss : T{0};
  return combine_losses(masked_cross_entropy(fwd.y_seg, labels.voronoi), masked_cross_entropy(fwd.y_seg, labels.cluster),
                        masked_cross_entropy(fwd.y_cc, labels.point), frw, weights);
}

}  // namespace splitexpand
