#pragma once

// Coarse training labels from dot annotations: K-Means cluster labels,
// Voronoi labels and enlarged-point labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "errors.hpp"
#include "kmeans.hpp"
#include "tensor.hpp"

namespace splitexpand {

struct Point {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Point&, const Point&) = default;
};

struct PointAnnotation {
  std::vector<Point> points;

  // Throws DataError for out-of-bounds or duplicate points.
  void validate(int height, int width) const {
    std::set<Point> seen;
    for (const auto& p : points) {
      if (p.row < 0 || p.col < 0 || p.row >= height || p.col >= width) {
        throw DataError("annotation point (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                        ") outside " + std::to_string(height) + "x" + std::to_string(width) + " image");
      }
      if (!seen.insert(p).second) {
        throw DataError("duplicate annotation point (" + std::to_string(p.row) + "," + std::to_string(p.col) + ")");
      }
    }
  }
};

inline constexpr std::uint8_t kLabelBackground = 0;
inline constexpr std::uint8_t kLabelCell = 1;
inline constexpr std::uint8_t kLabelIgnore = 255;

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> codes;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill) : height(h), width(w), codes(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int r, int c) { return codes[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return codes[static_cast<std::size_t>(r) * width + c]; }

  std::size_t count(std::uint8_t code) const { return static_cast<std::size_t>(std::count(codes.begin(), codes.end(), code)); }

  bool valid_codes() const {
    return std::all_of(codes.begin(), codes.end(),
                       [](std::uint8_t v) { return v == kLabelBackground || v == kLabelCell || v == kLabelIgnore; });
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// 3x3 square around each point labeled cell (clipped at borders), everything
// else background.
inline LabelMap enlarged_point_labels(const PointAnnotation& pts, int height, int width) {
  pts.validate(height, width);
  LabelMap out(height, width, kLabelBackground);
  for (const auto& p : pts.points) {
    for (int r = std::max(0, p.row - 1); r <= std::min(height - 1, p.row + 1); ++r)
      for (int c = std::max(0, p.col - 1); c <= std::min(width - 1, p.col + 1); ++c) out.at(r, c) = kLabelCell;
  }
  return out;
}

// Index of the nearest point for every pixel (squared Euclidean distance,
// ties to the lower point index). `tied`, when given, flags pixels that are
// equidistant to more than one point.
inline std::vector<int> voronoi_regions(const PointAnnotation& pts, int height, int width,
                                        std::vector<bool>* tied = nullptr) {
  std::vector<int> region(static_cast<std::size_t>(height) * width, -1);
  if (tied) tied->assign(region.size(), false);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      long best = std::numeric_limits<long>::max();
      int arg = -1;
      bool tie = false;
      for (std::size_t i = 0; i < pts.points.size(); ++i) {
        const long dr = r - pts.points[i].row, dc = c - pts.points[i].col;
        const long d = dr * dr + dc * dc;
        if (d < best) {
          best = d;
          arg = static_cast<int>(i);
          tie = false;
        } else if (d == best) {
          tie = true;
        }
      }
      region[static_cast<std::size_t>(r) * width + c] = arg;
      if (tied) (*tied)[static_cast<std::size_t>(r) * width + c] = tie;
    }
  }
  return region;
}

// Ridge pixels (equidistant to several points, or 8-adjacent to a pixel whose
// nearest point differs) are background; the 3x3 square around each point,
// restricted to pixels not closer to another point, is cell; everything else
// is ignore.
inline LabelMap voronoi_labels(const PointAnnotation& pts, int height, int width) {
  pts.validate(height, width);
  LabelMap out(height, width, kLabelIgnore);
  if (pts.points.empty()) return out;
  std::vector<bool> tied;
  const auto region = voronoi_regions(pts, height, width, &tied);
  auto idx = [&](int r, int c) { return static_cast<std::size_t>(r) * width + c; };
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      bool ridge = tied[idx(r, c)];
      for (int dr = -1; dr <= 1 && !ridge; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= height || cc >= width) continue;
          if (tied[idx(rr, cc)] || region[idx(rr, cc)] != region[idx(r, c)]) {
            ridge = true;
            break;
          }
        }
      if (ridge) out.at(r, c) = kLabelBackground;
    }
  }
  for (std::size_t i = 0; i < pts.points.size(); ++i) {
    const auto& p = pts.points[i];
    for (int r = std::max(0, p.row - 1); r <= std::min(height - 1, p.row + 1); ++r)
      for (int c = std::max(0, p.col - 1); c <= std::min(width - 1, p.col + 1); ++c) {
        const long dr = r - p.row, dc = c - p.col;
        const long own = dr * dr + dc * dc;
        const auto& q = pts.points[region[idx(r, c)]];
        const long qr = r - q.row, qc = c - q.col;
        if (own == qr * qr + qc * qc) out.at(r, c) = kLabelCell;
      }
  }
  return out;
}

namespace detail {

// 1-D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {  // k == 0 and parabola at v[0] is dominated
      v[0] = q;
      z[0] = -std::numeric_limits<double>::infinity();
      z[1] = std::numeric_limits<double>::infinity();
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  d.resize(n);
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Exact Euclidean distance from every pixel to the nearest point.
inline std::vector<double> distance_to_points(const PointAnnotation& pts, int height, int width) {
  constexpr double kFar = 1e20;
  std::vector<double> g(static_cast<std::size_t>(height) * width, kFar);
  for (const auto& p : pts.points) g[static_cast<std::size_t>(p.row) * width + p.col] = 0.0;
  std::vector<double> f, d;
  for (int c = 0; c < width; ++c) {
    f.resize(height);
    for (int r = 0; r < height; ++r) f[r] = g[static_cast<std::size_t>(r) * width + c];
    detail::edt_1d(f, d);
    for (int r = 0; r < height; ++r) g[static_cast<std::size_t>(r) * width + c] = d[r];
  }
  for (int r = 0; r < height; ++r) {
    f.assign(g.begin() + static_cast<std::ptrdiff_t>(r) * width, g.begin() + static_cast<std::ptrdiff_t>(r + 1) * width);
    detail::edt_1d(f, d);
    for (int c = 0; c < width; ++c) g[static_cast<std::size_t>(r) * width + c] = std::sqrt(d[c]);
  }
  return g;
}

struct ClusterLabelOptions {
  int k = 3;
  double distance_weight = 0.5;  // weight of the normalized distance feature relative to colour
  int restarts = 10;             // k-means++ restarts per seeding round; lowest inertia wins
  int max_reseeds = 5;
};

// K-Means (k = 3) over per-pixel (R, G, B, w * d) where d is the
// max-normalized distance to the nearest annotation point. The cluster holding
// the most annotation points is cell; of the other two, the one with the
// larger mean d is background and the last is ignore.
//
// A clustering is degenerate when a cluster is empty or two clusters share a
// colour centroid (colour cannot separate them); degenerate results are
// re-seeded up to `max_reseeds` times before a DataError.
inline LabelMap cluster_labels(const Tensor<float>& image, const PointAnnotation& pts, std::uint64_t seed,
                               const ClusterLabelOptions& opts = {}) {
  if (opts.k != 3) throw ConfigError("cluster labels need k = 3, got " + std::to_string(opts.k));
  if (image.rank() != 4 || image.batch() != 1 || image.channels() != 3) {
    throw DataError("cluster labels need a 1x3xHxW image, got " + dims_string(image.dims()));
  }
  if (pts.points.empty()) throw DataError("cluster labels need at least one annotation point");
  const int h = image.height(), w = image.width();
  pts.validate(h, w);

  auto dist = distance_to_points(pts, h, w);
  const double dmax = *std::max_element(dist.begin(), dist.end());
  if (dmax > 0.0) {
    for (auto& v : dist) v /= dmax;
  }
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<double> features(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) features[i * 4 + c] = image.channel_ptr(0, c)[i];
    features[i * 4 + 3] = opts.distance_weight * dist[i];
  }

  auto degenerate = [](const KMeansResult& r) {
    for (std::size_t a = 0; a < r.sizes.size(); ++a) {
      if (r.sizes[a] == 0) return true;
      for (std::size_t b = a + 1; b < r.sizes.size(); ++b) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) s += std::abs(r.centroids[a][c] - r.centroids[b][c]);
        if (s < 1e-6) return true;
      }
    }
    return false;
  };

  Rng seeds(seed);
  std::optional<KMeansResult> best;
  for (int round = 0; round <= opts.max_reseeds && !best; ++round) {
    for (int i = 0; i < opts.restarts; ++i) {
      auto r = kmeans(features, 4, 3, seeds.fork_seed());
      if (degenerate(r)) continue;
      if (!best || r.inertia < best->inertia) best = std::move(r);
    }
  }
  if (!best) {
    throw DataError("k-means produced degenerate clusters after " + std::to_string(opts.max_reseeds) + " re-seeds");
  }

  std::vector<int> point_count(3, 0);
  std::vector<double> mean_d(3, 0.0);
  for (const auto& p : pts.points) ++point_count[best->assignment[static_cast<std::size_t>(p.row) * w + p.col]];
  for (std::size_t i = 0; i < n; ++i) mean_d[best->assignment[i]] += dist[i];
  for (int c = 0; c < 3; ++c) mean_d[c] /= static_cast<double>(best->sizes[c]);

  int cell = 0;
  for (int c = 1; c < 3; ++c) {
    if (point_count[c] > point_count[cell] || (point_count[c] == point_count[cell] && mean_d[c] < mean_d[cell])) {
      cell = c;
    }
  }
  std::vector<int> rest;
  for (int c = 0; c < 3; ++c)
    if (c != cell) rest.push_back(c);
  const int background = mean_d[rest[0]] >= mean_d[rest[1]] ? rest[0] : rest[1];

  LabelMap out(h, w, kLabelIgnore);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = best->assignment[i];
    out.codes[i] = a == cell ? kLabelCell : (a == background ? kLabelBackground : kLabelIgnore);
  }
  return out;
}

}  // namespace splitexpand
