#pragma once

// Pixel-level (accuracy, F1) and object-level (object Dice, AJI) metrics.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "grid.hpp"

namespace splitexpand {

struct PixelMetrics {
  double accuracy = 0;
  double f1 = 0;
};

inline PixelMetrics pixel_metrics(const Mask& pred, const Mask& gt) {
  check_same_shape(pred, gt, "pixel_metrics");
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    tp += p && g;
    tn += !p && !g;
    fp += p && !g;
    fn += !p && g;
  }
  PixelMetrics m;
  m.accuracy = pred.size() ? static_cast<double>(tp + tn) / static_cast<double>(pred.size()) : 1.0;
  m.f1 = tp + fp + fn ? 2.0 * tp / static_cast<double>(2 * tp + fp + fn) : 1.0;
  return m;
}

namespace detail {

// Instance sizes and the sparse intersection table between two maps.
struct OverlapTable {
  std::vector<std::size_t> gt_size, pred_size;                 // index 0 unused
  std::vector<std::vector<std::pair<int, std::size_t>>> by_gt;  // (pred id, |G ∩ S|), ascending pred id
  std::vector<std::vector<std::pair<int, std::size_t>>> by_pred;

  OverlapTable(const InstanceMap& gt, const InstanceMap& pred) {
    check_same_shape(gt, pred, "instance metrics");
    const int kg = instance_count(gt), kp = instance_count(pred);
    gt_size.assign(kg + 1, 0);
    pred_size.assign(kp + 1, 0);
    std::map<std::pair<int, int>, std::size_t> inter;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      ++gt_size[gt[i] > 0 ? gt[i] : 0];
      ++pred_size[pred[i] > 0 ? pred[i] : 0];
      if (gt[i] > 0 && pred[i] > 0) ++inter[{gt[i], pred[i]}];
    }
    gt_size[0] = pred_size[0] = 0;
    by_gt.resize(kg + 1);
    by_pred.resize(kp + 1);
    for (const auto& [k, n] : inter) {
      by_gt[k.first].push_back({k.second, n});
      by_pred[k.second].push_back({k.first, n});
    }
  }

  std::size_t present(const std::vector<std::size_t>& sizes) const {
    std::size_t n = 0;
    for (std::size_t i = 1; i < sizes.size(); ++i) n += sizes[i] > 0;
    return n;
  }
};

// Σ_i weight_i * Dice(A_i, best-overlap partner) over one side.
inline double weighted_dice(const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& other_sizes,
                            const std::vector<std::vector<std::pair<int, std::size_t>>>& overlaps) {
  std::size_t total = 0;
  for (std::size_t i = 1; i < sizes.size(); ++i) total += sizes[i];
  double sum = 0;
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (!sizes[i]) continue;
    int best = 0;
    std::size_t best_n = 0;
    for (const auto& [j, n] : overlaps[i]) {
      if (n > best_n) {  // ascending IDs: ties keep the lowest
        best = j;
        best_n = n;
      }
    }
    if (!best) continue;
    const double dice = 2.0 * best_n / static_cast<double>(sizes[i] + other_sizes[best]);
    sum += static_cast<double>(sizes[i]) / static_cast<double>(total) * dice;
  }
  return sum;
}

}  // namespace detail

// ½[Σ γ_i Dice(G_i, S*(G_i)) + Σ σ_j Dice(G*(S_j), S_j)] with best-overlap
// matching; 1 when both maps are empty, 0 when exactly one is.
inline double object_dice(const InstanceMap& gt, const InstanceMap& pred) {
  const detail::OverlapTable t(gt, pred);
  const bool g_empty = t.present(t.gt_size) == 0, p_empty = t.present(t.pred_size) == 0;
  if (g_empty && p_empty) return 1.0;
  if (g_empty || p_empty) return 0.0;
  return 0.5 * (detail::weighted_dice(t.gt_size, t.pred_size, t.by_gt) +
                detail::weighted_dice(t.pred_size, t.gt_size, t.by_pred));
}

// Aggregated Jaccard index. Each ground-truth instance is paired with the
// prediction of highest Jaccard (ties to the lowest ID); a prediction may be
// paired more than once but counts as used once. Unused predictions add
// their size to the union.
inline double aji(const InstanceMap& gt, const InstanceMap& pred) {
  const detail::OverlapTable t(gt, pred);
  const bool g_empty = t.present(t.gt_size) == 0, p_empty = t.present(t.pred_size) == 0;
  if (g_empty && p_empty) return 1.0;
  if (g_empty || p_empty) return 0.0;
  std::size_t c = 0, u = 0;
  std::vector<bool> used(t.pred_size.size(), false);
  for (std::size_t i = 1; i < t.gt_size.size(); ++i) {
    if (!t.gt_size[i]) continue;
    int best = 0;
    double best_j = 0;
    std::size_t best_n = 0;
    for (const auto& [j, n] : t.by_gt[i]) {
      const double jac = static_cast<double>(n) / static_cast<double>(t.gt_size[i] + t.pred_size[j] - n);
      if (jac > best_j) {
        best = j;
        best_j = jac;
        best_n = n;
      }
    }
    if (!best) {
      u += t.gt_size[i];
      continue;
    }
    c += best_n;
    u += t.gt_size[i] + t.pred_size[best] - best_n;
    used[best] = true;
  }
  for (std::size_t j = 1; j < t.pred_size.size(); ++j)
    if (!used[j]) u += t.pred_size[j];
  return u ? static_cast<double>(c) / static_cast<double>(u) : 1.0;
}

struct ImageMetrics {
  std::string name;
  double pixel_accuracy = 0;
  double pixel_f1 = 0;
  double object_dice = 0;
  double aji = 0;
};

inline ImageMetrics evaluate_instances(const std::string& name, const InstanceMap& gt, const InstanceMap& pred) {
  const auto px = pixel_metrics(foreground(pred), foreground(gt));
  return {name, px.accuracy, px.f1, object_dice(gt, pred), splitexpand::aji(gt, pred)};
}

struct MetricsReport {
  std::vector<ImageMetrics> images;
  ImageMetrics mean;  // unweighted mean over images

  static MetricsReport from(std::vector<ImageMetrics> images) {
    MetricsReport r{std::move(images), {"mean", 0, 0, 0, 0}};
    for (const auto& m : r.images) {
      r.mean.pixel_accuracy += m.pixel_accuracy;
      r.mean.pixel_f1 += m.pixel_f1;
      r.mean.object_dice += m.object_dice;
      r.mean.aji += m.aji;
    }
    if (!r.images.empty()) {
      const double n = static_cast<double>(r.images.size());
      r.mean.pixel_accuracy /= n;
      r.mean.pixel_f1 /= n;
      r.mean.object_dice /= n;
      r.mean.aji /= n;
    }
    return r;
  }

  nlohmann::json to_json() const {
    auto row = [](const ImageMetrics& m) {
      return nlohmann::json{{"acc", m.pixel_accuracy}, {"pixel_f1", m.pixel_f1}, {"dice_obj", m.object_dice}, {"aji", m.aji}};
    };
    nlohmann::json j = row(mean);
    j["count"] = images.size();
    nlohmann::json per = nlohmann::json::object();
    for (const auto& m : images) per[m.name] = row(m);
    j["images"] = per;
    return j;
  }
};

}  // namespace splitexpand
