#pragma once

// Desk-scale trainer: Adam over all trainable arrays, one image per step,
// batchnorm in batch-statistics mode with running statistics updated by
// momentum, and flip / 90-degree rotation / crop augmentation.

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "backward.hpp"
#include "errors.hpp"
#include "labels.hpp"
#include "network.hpp"
#include "rng.hpp"

namespace splitexpand {

struct TrainSample {
  Tensor<float> image;  // 1x3xHxW in [0,1]
  LabelSet labels;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AugmentConfig {
  bool enabled = true;
  bool flips = true;
  bool rot90 = true;
  int patch_size = 0;  // square random crop; 0 keeps the full image
};

struct TrainConfig {
  int epochs = 200;
  AdamConfig adam;
  AugmentConfig augment;
  LossWeights weights = LossWeights::defaults(false);
  FrwConfig frw;
  std::set<std::string> frozen_layers;
  std::uint64_t seed = 0;
  int validate_every = 10;
};

struct EpochLoss {
  int epoch = 0;
  double loss_seg = 0;
  double loss_cc = 0;
  double loss_frw = 0;  // unweighted FRW cross-entropy (0 when disabled)
};

struct TrainResult {
  std::vector<EpochLoss> log;
  std::optional<int> selected_epoch;  // epoch whose weights were kept (validation)
  double selected_score = 0;
};

inline void write_loss_log(std::ostream& os, const std::vector<EpochLoss>& log) {
  os << "epoch,loss_seg,loss_cc,loss_frw\n";
  os.precision(9);
  for (const auto& e : log) os << e.epoch << ',' << e.loss_seg << ',' << e.loss_cc << ',' << e.loss_frw << '\n';
}

// --- augmentation ----------------------------------------------------------

// A geometric transform of an HxW grid: optional crop, then flips, then k
// quarter turns counter-clockwise.
struct GridTransform {
  int crop_y = 0, crop_x = 0, crop_h = 0, crop_w = 0;
  bool flip_v = false, flip_h = false;
  int quarter_turns = 0;

  int out_height() const { return quarter_turns % 2 ? crop_w : crop_h; }
  int out_width() const { return quarter_turns % 2 ? crop_h : crop_w; }

  // Source (row, col) in the original grid for output pixel (y, x).
  std::pair<int, int> source(int y, int x) const {
    int r = y, c = x;
    int h = out_height(), w = out_width();
    for (int k = 0; k < quarter_turns; ++k) {
      // A counter-clockwise turn maps pre-turn (c, h-1-r) to (r, c), where
      // h is the post-turn height.
      const int pr = c, pc = h - 1 - r;
      r = pr;
      c = pc;
      std::swap(h, w);
    }
    if (flip_v) r = crop_h - 1 - r;
    if (flip_h) c = crop_w - 1 - c;
    return {r + crop_y, c + crop_x};
  }
};

inline GridTransform random_transform(Rng& rng, int h, int w, const AugmentConfig& cfg, int multiple) {
  GridTransform t{0, 0, h, w, false, false, 0};
  if (!cfg.enabled) return t;
  if (cfg.patch_size > 0) {
    if (cfg.patch_size % multiple) {
      throw ConfigError("patch size " + std::to_string(cfg.patch_size) + " not divisible by " + std::to_string(multiple));
    }
    t.crop_h = std::min(cfg.patch_size, h);
    t.crop_w = std::min(cfg.patch_size, w);
    t.crop_y = static_cast<int>(rng.uniform_int(0, h - t.crop_h));
    t.crop_x = static_cast<int>(rng.uniform_int(0, w - t.crop_w));
  }
  if (cfg.flips) {
    t.flip_v = rng.bernoulli(0.5);
    t.flip_h = rng.bernoulli(0.5);
  }
  if (cfg.rot90) t.quarter_turns = static_cast<int>(rng.uniform_int(0, 3));
  return t;
}

inline Tensor<float> transform_image(const Tensor<float>& img, const GridTransform& t) {
  Tensor<float> out({1, img.channels(), t.out_height(), t.out_width()});
  for (int y = 0; y < t.out_height(); ++y)
    for (int x = 0; x < t.out_width(); ++x) {
      const auto [r, c] = t.source(y, x);
      for (int ch = 0; ch < img.channels(); ++ch) out.at(0, ch, y, x) = img.at(0, ch, r, c);
    }
  return out;
}

inline LabelMap transform_labels(const LabelMap& l, const GridTransform& t) {
  LabelMap out(t.out_height(), t.out_width(), kLabelIgnore);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const auto [r, c] = t.source(y, x);
      out.at(y, x) = l.at(r, c);
    }
  return out;
}

// --- optimizer -----------------------------------------------------------

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(WeightMap<float>& params, const Gradients<float>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& [name, g] : grads) {
      auto& p = params.at(name);
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0f);
        v.assign(g.size(), 0.0f);
      }
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
        v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
        const double mh = m[i] / c1, vh = v[i] / c2;
        p[i] = static_cast<float>(p[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, std::vector<float>> m_, v_;
};

// running = (1 - momentum) * running + momentum * batch (unbiased variance).
template <typename T>
void update_running_stats(NetworkModel<T>& m, const ActivationTrace<T>& tr) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    if (l.kind != LayerKind::batchnorm || tr.bn_stats[i].mean.empty()) continue;
    const auto& in = layer_input(m, tr, i);
    const double n = static_cast<double>(in.batch()) * in.plane();
    const double unbias = n > 1 ? n / (n - 1) : 1.0;
    auto& rm = m.weight(l.name + ".running_mean");
    auto& rv = m.weight(l.name + ".running_var");
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = static_cast<T>((1 - kBatchNormMomentum) * rm[c] + kBatchNormMomentum * tr.bn_stats[i].mean[c]);
      rv[c] = static_cast<T>((1 - kBatchNormMomentum) * rv[c] + kBatchNormMomentum * tr.bn_stats[i].var[c] * unbias);
    }
  }
}

// Trains `m` in place. `validate`, when given, scores the model every
// `validate_every` epochs (and after the last); the best-scoring weights are
// kept. Deterministic for a given seed.
inline TrainResult train(NetworkModel<float>& m, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                         const std::function<double(const NetworkModel<float>&)>& validate = {},
                         const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  if (data.empty()) throw DataError("training set is empty");
  if (cfg.epochs < 0) throw ConfigError("epochs must be non-negative");
  for (const auto& s : data) {
    check_image(m, s.image);
    for (const LabelMap* l : {&s.labels.voronoi, &s.labels.cluster, &s.labels.point}) {
      if (l->height != s.image.height() || l->width != s.image.width()) {
        throw DataError("label map size does not match its image");
      }
    }
  }
  TrainResult result;
  if (cfg.epochs == 0) return result;

  Rng rng(cfg.seed);
  Adam adam(cfg.adam);
  BackwardOptions opts;
  opts.frozen_layers = cfg.frozen_layers;
  opts.mode = BnMode::training;
  const int multiple = 1 << m.depth;
  std::optional<WeightMap<float>> best;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    EpochLoss e{epoch, 0, 0, 0};
    for (const std::size_t idx : order) {
      const auto& s = data[idx];
      const auto t = random_transform(rng, s.image.height(), s.image.width(), cfg.augment, multiple);
      const Tensor<float> img = transform_image(s.image, t);
      const LabelSet labels{transform_labels(s.labels.voronoi, t), transform_labels(s.labels.cluster, t),
                            transform_labels(s.labels.point, t)};
      auto r = loss_and_gradients(m, img, labels, cfg.weights, cfg.frw, opts);
      update_running_stats(m, r.trace);
      adam.step(m.weights, r.grads);
      e.loss_seg += r.losses.loss_seg;
      e.loss_cc += r.losses.loss_cc;
      e.loss_frw += r.losses.frw;
    }
    const double n = static_cast<double>(data.size());
    e.loss_seg /= n;
    e.loss_cc /= n;
    e.loss_frw /= n;
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);

    if (validate && (epoch % std::max(1, cfg.validate_every) == 0 || epoch == cfg.epochs)) {
      const double score = validate(m);
      if (!best || score > result.selected_score) {
        best = m.weights;
        result.selected_score = score;
        result.selected_epoch = epoch;
      }
    }
  }
  if (best) m.weights = std::move(*best);
  return result;
}

}  // namespace splitexpand
