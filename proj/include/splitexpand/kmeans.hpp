#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "rng.hpp"

namespace splitexpand {

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> sizes;
  double inertia = 0.0;
};

// Lloyd's algorithm with k-means++ seeding over row-major `features`
// (n x dim). Deterministic for a given seed.
inline KMeansResult kmeans(const std::vector<double>& features, std::size_t dim, int k, std::uint64_t seed,
                           int max_iterations = 100) {
  const std::size_t n = features.size() / dim;
  KMeansResult r;
  r.centroids.assign(k, std::vector<double>(dim, 0.0));
  r.assignment.assign(n, -1);
  r.sizes.assign(k, 0);
  if (n == 0) return r;

  auto dist2 = [&](std::size_t i, const std::vector<double>& c) {
    double s = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double v = features[i * dim + d] - c[d];
      s += v * v;
    }
    return s;
  };

  Rng rng(seed);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  auto take = [&](int ci, std::size_t i) {
    for (std::size_t d = 0; d < dim; ++d) r.centroids[ci][d] = features[i * dim + d];
    for (std::size_t j = 0; j < n; ++j) nearest[j] = std::min(nearest[j], dist2(j, r.centroids[ci]));
  };
  take(0, static_cast<std::size_t>(rng.next_u64() % n));
  for (int ci = 1; ci < k; ++ci) {
    double total = 0.0;
    for (const double v : nearest) total += v;
    std::size_t pick = static_cast<std::size_t>(rng.next_u64() % n);
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t j = 0; j < n; ++j) {
        target -= nearest[j];
        if (target < 0.0) {
          pick = j;
          break;
        }
      }
    }
    take(ci, pick);
  }

  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(i, r.centroids[0]);
      for (int ci = 1; ci < k; ++ci) {
        const double d = dist2(i, r.centroids[ci]);
        if (d < bd) {
          bd = d;
          best = ci;
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::fill(r.sizes.begin(), r.sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int ci = r.assignment[i];
      ++r.sizes[ci];
      for (std::size_t d = 0; d < dim; ++d) sums[ci][d] += features[i * dim + d];
    }
    for (int ci = 0; ci < k; ++ci) {
      if (r.sizes[ci] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t d = 0; d < dim; ++d) r.centroids[ci][d] = sums[ci][d] / static_cast<double>(r.sizes[ci]);
    }
    if (!changed) break;
  }
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) r.inertia += dist2(i, r.centroids[r.assignment[i]]);
  return r;
}

}  // namespace splitexpand
