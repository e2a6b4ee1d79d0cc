#pragma once

// Probability maps to instances: morphological cleanup, condensation of the
// cell-centre (CC) map into points, Instance-Splitting and CC-Expansion.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "grid.hpp"
#include "lrp.hpp"
#include "network.hpp"

namespace splitexpand {

struct PostprocessConfig {
  double cc_confidence = 0.1;
  double heatmap_threshold = 0.05;  // fraction of the heatmap maximum
  double overlap_threshold = 0.5;
  int min_object_size = 5;
  double seg_threshold = 0.5;

  void validate() const {
    for (const double v : {cc_confidence, heatmap_threshold, overlap_threshold, seg_threshold}) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("postprocess thresholds must lie in [0, 1]");
    }
    if (min_object_size < 1) throw ConfigError("min_object_size must be at least 1");
  }
};

struct CcPoint {
  int row = 0;
  int col = 0;
  int source_blob_id = 0;
  friend bool operator==(const CcPoint&, const CcPoint&) = default;
};

// Cell-class probability plane of a 1x2xHxW softmax output.
template <typename T>
Grid<T> cell_probability(const Tensor<T>& probs) {
  if (probs.rank() != 4 || probs.batch() != 1 || probs.channels() != 2) {
    throw ShapeError("probability map", "expected 1x2xHxW, got " + dims_string(probs.dims()));
  }
  Grid<T> g(probs.height(), probs.width());
  std::copy_n(probs.channel_ptr(0, 1), g.size(), g.data.begin());
  return g;
}

// p(cell) > threshold.
template <typename T>
Mask binarize(const Grid<T>& prob, double threshold) {
  Mask m(prob.height, prob.width, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = prob[i] > static_cast<T>(threshold);
  return m;
}

// Background components (4-connectivity) not touching the border become
// foreground.
inline Mask fill_holes(const Mask& mask) {
  Mask bg(mask.height, mask.width, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) bg[i] = !mask[i];
  const InstanceMap comps = label_components(bg, false);
  std::vector<bool> touches(static_cast<std::size_t>(instance_count(comps)) + 1, false);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (r == 0 || c == 0 || r == mask.height - 1 || c == mask.width - 1) touches[comps.at(r, c)] = true;
  Mask out = mask;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (comps[i] && !touches[comps[i]]) out[i] = 1;
  return out;
}

// Fill holes, label 8-connected components, drop components smaller than
// `min_object_size`, renumber 1..K in raster order.
inline InstanceMap morph_cleanup(const Mask& binary, int min_object_size) {
  InstanceMap comps = label_components(fill_holes(binary), true);
  const auto px = instance_pixels(comps);
  for (std::size_t id = 1; id < px.size(); ++id) {
    if (static_cast<int>(px[id].size()) < min_object_size) {
      for (const auto i : px[id]) comps[i] = 0;
    }
  }
  return renumber_raster(comps);
}

struct CondensedCc {
  std::vector<CcPoint> points;  // raster order of their blobs
  InstanceMap blobs;            // blob IDs referenced by CcPoint::source_blob_id
};

// Threshold at cc_confidence (p >= threshold), clean up, and reduce each blob
// to its rounded centroid, snapped to the nearest blob pixel (L1, raster
// ties) when the centroid falls outside the blob.
template <typename T>
CondensedCc condense_cc(const Grid<T>& cc_prob, const PostprocessConfig& cfg) {
  Mask m(cc_prob.height, cc_prob.width, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = cc_prob[i] >= static_cast<T>(cfg.cc_confidence);
  CondensedCc out{{}, morph_cleanup(m, cfg.min_object_size)};
  const auto px = instance_pixels(out.blobs);
  const int w = cc_prob.width;
  for (std::size_t id = 1; id < px.size(); ++id) {
    double sr = 0, sc = 0;
    for (const auto i : px[id]) {
      sr += static_cast<double>(i / w);
      sc += static_cast<double>(i % w);
    }
    const double n = static_cast<double>(px[id].size());
    int r = static_cast<int>(std::lround(sr / n)), c = static_cast<int>(std::lround(sc / n));
    if (out.blobs.at(r, c) != static_cast<int>(id)) {
      int best = std::numeric_limits<int>::max(), br = r, bc = c;
      for (const auto i : px[id]) {  // pixels are in raster order, so the first minimum wins ties
        const int pr = static_cast<int>(i / w), pc = static_cast<int>(i % w);
        const int d = std::abs(pr - r) + std::abs(pc - c);
        if (d < best) {
          best = d;
          br = pr;
          bc = pc;
        }
      }
      r = br;
      c = bc;
    }
    out.points.push_back({r, c, static_cast<int>(id)});
  }
  return out;
}

// For every instance containing two or more CC points, reassigns each of its
// pixels to the nearest contained point (L1; ties to the raster-earliest
// point). The foreground is unchanged; output is renumbered 1..K'.
inline InstanceMap split_instances(const InstanceMap& instances, const std::vector<CcPoint>& points) {
  const int k = instance_count(instances);
  std::vector<std::vector<CcPoint>> owned(static_cast<std::size_t>(k) + 1);
  for (const auto& p : points) {
    if (!instances.contains(p.row, p.col)) throw DataError("CC point outside the instance map");
    const int id = instances.at(p.row, p.col);
    if (id > 0) owned[id].push_back(p);
  }
  for (auto& v : owned) {
    std::sort(v.begin(), v.end(), [](const CcPoint& a, const CcPoint& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
  }
  // Sub-instance labels: id * (max points + 1) + point rank keeps them distinct.
  std::size_t max_pts = 1;
  for (const auto& v : owned) max_pts = std::max(max_pts, v.size());
  InstanceMap out(instances.height, instances.width, 0);
  for (int r = 0; r < instances.height; ++r) {
    for (int c = 0; c < instances.width; ++c) {
      const int id = instances.at(r, c);
      if (id <= 0) continue;
      const auto& pts = owned[id];
      std::size_t sub = 0;
      if (pts.size() >= 2) {
        int best = std::numeric_limits<int>::max();
        for (std::size_t j = 0; j < pts.size(); ++j) {
          const int d = std::abs(pts[j].row - r) + std::abs(pts[j].col - c);
          if (d < best) {
            best = d;
            sub = j;
          }
        }
      }
      out.at(r, c) = static_cast<int>(id * (max_pts + 1) + sub);
    }
  }
  return renumber_raster(out);
}

// |a ∩ b| / min(|a|, |b|) for sorted pixel-index sets.
inline double overlap_ratio(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.empty() || b.empty()) throw DataError("overlap ratio of an empty pixel set");
  std::size_t inter = 0;
  for (std::size_t i = 0, j = 0; i < a.size() && j < b.size();) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(std::min(a.size(), b.size()));
}

enum class ExpansionOutcome { added, below_threshold, overlap, too_small };

struct ExpansionRecord {
  CcPoint point;
  ExpansionOutcome outcome = ExpansionOutcome::below_threshold;
  double max_overlap = 0.0;     // largest overlap ratio of the raw component with an instance
  int instance_id = 0;          // new instance ID when added
  Grid<float> heatmap;          // max-normalized input heatmap
};

struct ExpansionResult {
  InstanceMap instances;
  std::vector<ExpansionRecord> records;  // one per orphan CC point
};

// Grows CC points lying on background into new instances from their LRP
// heatmaps. Existing instances are never modified; new instances get IDs
// K+1.. in CC-point raster order.
template <typename T>
ExpansionResult expand_cc(const InstanceMap& instances, const CondensedCc& cc, const NetworkModel<T>& model,
                          const ActivationTrace<T>& trace, const PostprocessConfig& cfg) {
  check_same_shape(instances, cc.blobs, "expand_cc");
  ExpansionResult res{instances, {}};
  std::vector<CcPoint> orphans;
  for (const auto& p : cc.points)
    if (instances.at(p.row, p.col) == 0) orphans.push_back(p);
  std::sort(orphans.begin(), orphans.end(),
            [](const CcPoint& a, const CcPoint& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });

  const int w = instances.width;
  for (const auto& p : orphans) {
    ExpansionRecord rec{p, ExpansionOutcome::below_threshold, 0.0, 0, Grid<float>(instances.height, w, 0.0f)};
    OutputTarget target{Head::cc, {}, 1};
    for (std::size_t i = 0; i < cc.blobs.size(); ++i)
      if (cc.blobs[i] == p.source_blob_id) target.pixels.emplace_back(static_cast<int>(i / w), static_cast<int>(i % w));
    if (target.pixels.empty()) target.pixels.emplace_back(p.row, p.col);
    const Tensor<T> heat = explain(model, trace, target);
    T hmax{};
    for (std::size_t i = 0; i < heat.size(); ++i) hmax = std::max(hmax, heat[i]);
    if (hmax > T{0}) {
      for (std::size_t i = 0; i < heat.size(); ++i) rec.heatmap[i] = static_cast<float>(heat[i] / hmax);
    }
    Mask above(instances.height, w, 0);
    for (std::size_t i = 0; i < above.size(); ++i) above[i] = hmax > T{0} && rec.heatmap[i] >= cfg.heatmap_threshold;
    if (!above.at(p.row, p.col)) {
      res.records.push_back(std::move(rec));
      continue;
    }
    const InstanceMap comps = label_components(above, true);
    const int cid = comps.at(p.row, p.col);
    std::vector<std::size_t> raw;
    for (std::size_t i = 0; i < comps.size(); ++i)
      if (comps[i] == cid) raw.push_back(i);

    const auto owned = instance_pixels(res.instances);
    for (std::size_t id = 1; id < owned.size(); ++id) {
      if (!owned[id].empty()) rec.max_overlap = std::max(rec.max_overlap, overlap_ratio(raw, owned[id]));
    }
    if (rec.max_overlap > cfg.overlap_threshold) {
      rec.outcome = ExpansionOutcome::overlap;
      res.records.push_back(std::move(rec));
      continue;
    }
    std::vector<std::size_t> free_px;
    for (const auto i : raw)
      if (res.instances[i] == 0) free_px.push_back(i);
    if (static_cast<int>(free_px.size()) < cfg.min_object_size) {
      rec.outcome = ExpansionOutcome::too_small;
      res.records.push_back(std::move(rec));
      continue;
    }
    const int id = instance_count(res.instances) + 1;
    for (const auto i : free_px) res.instances[i] = id;
    rec.outcome = ExpansionOutcome::added;
    rec.instance_id = id;
    res.records.push_back(std::move(rec));
  }
  return res;
}

}  // namespace splitexpand
