#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "splitexpand/labels.hpp"
#include "splitexpand/rng.hpp"
#include "bench_support.hpp"

namespace se = splitexpand;
using se::testing::disk_scene;

namespace {

se::PointAnnotation random_points(se::Rng& rng, int h, int w, int n) {
  std::set<se::Point> s;
  while (static_cast<int>(s.size()) < n) s.insert({static_cast<int>(rng.uniform_int(0, h - 1)), static_cast<int>(rng.uniform_int(0, w - 1))});
  return {std::vector<se::Point>(s.begin(), s.end())};
}

// Brute-force nearest points (all minimizers) for a pixel.
std::set<int> nearest_set(const se::PointAnnotation& pts, int r, int c) {
  double best = 1e300;
  std::set<int> out;
  for (std::size_t i = 0; i < pts.points.size(); ++i) {
    const double d = std::hypot(r - pts.points[i].row, c - pts.points[i].col);
    if (d < best - 1e-12) {
      best = d;
      out = {static_cast<int>(i)};
    } else if (std::abs(d - best) <= 1e-12) {
      out.insert(static_cast<int>(i));
    }
  }
  return out;
}

}  // namespace

TEST(PointAnnotation, RejectsOutOfBoundsAndDuplicates) {
  se::PointAnnotation a{{{0, 0}, {4, 5}}};
  EXPECT_THROW(a.validate(4, 6), se::DataError);
  se::PointAnnotation b{{{1, 1}, {1, 1}}};
  EXPECT_THROW(b.validate(4, 4), se::DataError);
  EXPECT_NO_THROW(se::PointAnnotation({{{3, 3}}}).validate(4, 4));
}

TEST(EnlargedPointLabels, CenterPointGivesNineCells) {
  auto m = se::enlarged_point_labels({{{5, 5}}}, 11, 11);
  EXPECT_EQ(m.count(se::kLabelCell), 9u);
  EXPECT_EQ(m.count(se::kLabelBackground), 112u);
  EXPECT_EQ(m.count(se::kLabelIgnore), 0u);
}

TEST(EnlargedPointLabels, CornerPointClipped) {
  auto m = se::enlarged_point_labels({{{0, 0}}}, 11, 11);
  EXPECT_EQ(m.count(se::kLabelCell), 4u);
}

TEST(EnlargedPointLabels, OverlappingSquaresUnion) {
  auto m = se::enlarged_point_labels({{{0, 0}, {0, 2}}}, 11, 11);
  EXPECT_EQ(m.count(se::kLabelCell), 8u);  // cols 0..3 in rows 0..1
  for (int r = 0; r < 11; ++r)
    for (int c = 0; c < 11; ++c) EXPECT_EQ(m.at(r, c) == se::kLabelCell, r <= 1 && c <= 3) << r << "," << c;
}

TEST(EnlargedPointLabels, CountEqualsUnionOfClippedSquares) {
  se::Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = static_cast<int>(rng.uniform_int(3, 20)), w = static_cast<int>(rng.uniform_int(3, 20));
    auto pts = random_points(rng, h, w, static_cast<int>(rng.uniform_int(1, 6)));
    auto m = se::enlarged_point_labels(pts, h, w);
    std::set<std::pair<int, int>> uni;
    for (const auto& p : pts.points)
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int r = p.row + dr, c = p.col + dc;
          if (r >= 0 && c >= 0 && r < h && c < w) uni.insert({r, c});
        }
    EXPECT_EQ(m.count(se::kLabelCell), uni.size());
    for (const auto& p : pts.points) EXPECT_EQ(m.at(p.row, p.col), se::kLabelCell);
    EXPECT_EQ(m.count(se::kLabelIgnore), 0u);
  }
}

TEST(VoronoiLabels, TwoPointsOnARow) {
  auto m = se::voronoi_labels({{{0, 0}, {0, 9}}}, 1, 10);
  const std::vector<std::uint8_t> expected{1, 1, 255, 255, 0, 0, 255, 255, 1, 1};
  EXPECT_EQ(m.codes, expected);
}

TEST(VoronoiLabels, SinglePointHasNoRidge) {
  auto m = se::voronoi_labels({{{4, 4}}}, 9, 9);
  EXPECT_EQ(m.count(se::kLabelBackground), 0u);
  EXPECT_EQ(m.count(se::kLabelCell), 9u);
  EXPECT_EQ(m.count(se::kLabelIgnore), 72u);
}

TEST(VoronoiLabels, SymmetricSquareLayout) {
  const int n = 21;
  auto m = se::voronoi_labels({{{5, 5}, {5, 15}, {15, 5}, {15, 15}}}, n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      EXPECT_EQ(m.at(r, c), m.at(c, r));
      EXPECT_EQ(m.at(r, c), m.at(n - 1 - r, c));
      EXPECT_EQ(m.at(r, c), m.at(r, n - 1 - c));
    }
  EXPECT_EQ(m.at(10, 3), se::kLabelBackground);
  EXPECT_EQ(m.at(5, 5), se::kLabelCell);
}

TEST(VoronoiLabels, CellPixelsBelongToNearestPointBruteForce) {
  se::Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = static_cast<int>(rng.uniform_int(2, 32)), w = static_cast<int>(rng.uniform_int(2, 32));
    const int n = static_cast<int>(rng.uniform_int(2, std::min(12, h * w)));
    auto pts = random_points(rng, h, w, n);
    auto m = se::voronoi_labels(pts, h, w);
    ASSERT_TRUE(m.valid_codes());
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (m.at(r, c) != se::kLabelCell) continue;
        // The pixel lies in some point's square; that point must be a nearest one.
        bool ok = false;
        const auto near = nearest_set(pts, r, c);
        for (int i : near) {
          const auto& p = pts.points[i];
          if (std::abs(p.row - r) <= 1 && std::abs(p.col - c) <= 1) ok = true;
        }
        EXPECT_TRUE(ok) << "trial " << trial << " pixel " << r << "," << c;
      }
    for (const auto& p : pts.points) EXPECT_EQ(m.at(p.row, p.col), se::kLabelCell);
  }
}

TEST(DistanceTransform, MatchesBruteForce) {
  se::Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = static_cast<int>(rng.uniform_int(1, 25)), w = static_cast<int>(rng.uniform_int(1, 25));
    auto pts = random_points(rng, h, w, static_cast<int>(rng.uniform_int(1, std::min(5, h * w))));
    auto d = se::distance_to_points(pts, h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double best = 1e300;
        for (const auto& p : pts.points) best = std::min(best, std::hypot(r - p.row, c - p.col));
        EXPECT_NEAR(d[r * w + c], best, 1e-9);
      }
  }
}

TEST(ClusterLabels, RejectsKOtherThanThree) {
  se::Tensor<float> img({1, 3, 8, 8}, 0.5f);
  se::ClusterLabelOptions o;
  o.k = 4;
  EXPECT_THROW(se::cluster_labels(img, {{{1, 1}}}, 0, o), se::ConfigError);
}

TEST(ClusterLabels, UniformImageIsDegenerate) {
  se::Tensor<float> img({1, 3, 16, 16}, 0.4f);
  EXPECT_THROW(se::cluster_labels(img, {{{4, 4}, {11, 11}}}, 1), se::DataError);
}

TEST(ClusterLabels, DiskBenchmark) {
  auto s = disk_scene(96, 24, 6.0);
  auto m = se::cluster_labels(s.image, s.points, 7);
  std::size_t agree = 0, total = 0;
  for (int i = 0; i < 96 * 96; ++i) {
    if (s.coverage[i] == 1.0) {
      ++total;
      agree += m.codes[i] == se::kLabelCell;
    } else if (s.coverage[i] == 0.0) {
      ++total;
      agree += m.codes[i] == se::kLabelBackground;
    }
  }
  EXPECT_GE(static_cast<double>(agree) / total, 0.99);
}

TEST(ClusterLabels, PointsInsideOneBlobMakeItCell) {
  // Left half dark, right half bright, with a mid-grey band; all points in the dark half.
  se::Tensor<float> img({1, 3, 20, 30}, 0.0f);
  for (int r = 0; r < 20; ++r)
    for (int c = 0; c < 30; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(0, ch, r, c) = c < 10 ? 0.1f : (c < 20 ? 0.5f : 0.9f);
  auto m = se::cluster_labels(img, {{{5, 3}, {15, 6}}}, 2);
  EXPECT_EQ(m.at(5, 3), se::kLabelCell);
  EXPECT_EQ(m.at(15, 6), se::kLabelCell);
}

TEST(ClusterLabels, DeterministicAndSeedStableOnSeparableData) {
  auto s = disk_scene(48, 24, 6.0);
  auto a = se::cluster_labels(s.image, s.points, 1);
  EXPECT_EQ(a, se::cluster_labels(s.image, s.points, 1));
  EXPECT_EQ(a, se::cluster_labels(s.image, s.points, 99));
}
