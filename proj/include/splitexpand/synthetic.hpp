#pragma once

// Synthetic stained-nuclei images: dark elliptical cells on a bright ground,
// with exact instance maps and centroid point annotations. Some cells are
// placed in touching pairs ("clumps") and some are small.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "errors.hpp"
#include "grid.hpp"
#include "labels.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace splitexpand {

inline constexpr float kBackgroundColor[3] = {0.90f, 0.75f, 0.85f};
inline constexpr float kNucleusColor[3] = {0.35f, 0.20f, 0.55f};

struct SyntheticSpec {
  int count = 10;
  int height = 64;
  int width = 64;
  int min_cells = 5;
  int max_cells = 10;
  double min_radius = 4.0;
  double max_radius = 7.0;
  double clump_fraction = 0.0;  // fraction of cells placed in touching pairs
  double small_fraction = 0.0;  // fraction of cells drawn with the small radius range
  double small_min_radius = 2.0;
  double small_max_radius = 3.0;
  double noise = 0.02;          // std-dev of additive Gaussian pixel noise
  std::uint64_t seed = 0;

  void validate() const {
    if (count < 0 || height < 1 || width < 1) throw ConfigError("synthetic image count and size must be positive");
    if (min_cells < 0 || max_cells < min_cells) throw ConfigError("empty cells-per-image range");
    if (!(min_radius > 0 && max_radius >= min_radius)) throw ConfigError("empty radius range");
    if (!(small_min_radius > 0 && small_max_radius >= small_min_radius)) throw ConfigError("empty small-radius range");
    for (const double f : {clump_fraction, small_fraction}) {
      if (!(f >= 0 && f <= 1)) throw ConfigError("synthetic fractions must lie in [0, 1]");
    }
    if (clump_fraction + small_fraction > 1) throw ConfigError("clump and small-cell fractions exceed 1 together");
    if (!(noise >= 0)) throw ConfigError("noise level must be non-negative");
  }
};

struct SyntheticImage {
  std::string name;
  Tensor<float> image;       // 1x3xHxW in [0,1]
  InstanceMap instances;     // 1..K in raster order
  PointAnnotation points;    // points[k-1] lies in instance k
  std::vector<bool> small;   // small[k-1]: instance k was drawn small
  std::vector<bool> clumped; // clumped[k-1]: instance k touches its pair partner
};

namespace detail {

struct Ellipse {
  double cy, cx, ry, rx, theta;
};

// Pixels of an ellipse, or empty if any part falls outside the image (with a
// one-pixel margin).
inline std::vector<std::size_t> rasterize(const Ellipse& e, int h, int w) {
  const double reach = std::max(e.ry, e.rx);
  const int r0 = static_cast<int>(std::floor(e.cy - reach)), r1 = static_cast<int>(std::ceil(e.cy + reach));
  const int c0 = static_cast<int>(std::floor(e.cx - reach)), c1 = static_cast<int>(std::ceil(e.cx + reach));
  const double cs = std::cos(e.theta), sn = std::sin(e.theta);
  std::vector<std::size_t> px;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double dy = r - e.cy, dx = c - e.cx;
      const double u = (dy * cs + dx * sn) / e.ry, v = (-dy * sn + dx * cs) / e.rx;
      if (u * u + v * v > 1.0) continue;
      if (r < 1 || c < 1 || r >= h - 1 || c >= w - 1) return {};
      px.push_back(static_cast<std::size_t>(r) * w + c);
    }
  return px;
}

// Pixel ownership of the cells placed so far.
class Canvas {
 public:
  Canvas(int h, int w) : owner_(h, w, 0) {}

  // Owners of pixels in the closed 8-neighbourhood of px.
  std::vector<int> neighbours(const std::vector<std::size_t>& px) const {
    std::vector<int> out;
    for (const auto i : px) {
      const int r = static_cast<int>(i) / owner_.width, c = static_cast<int>(i) % owner_.width;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!owner_.contains(r + dy, c + dx)) continue;
          const int o = owner_.at(r + dy, c + dx);
          if (o && std::find(out.begin(), out.end(), o) == out.end()) out.push_back(o);
        }
    }
    return out;
  }

  bool overlaps(const std::vector<std::size_t>& px) const {
    return std::any_of(px.begin(), px.end(), [&](std::size_t i) { return owner_[i] != 0; });
  }

  void paint(const std::vector<std::size_t>& px, int id) {
    for (const auto i : px) owner_[i] = id;
  }

  const InstanceMap& owners() const { return owner_; }

 private:
  InstanceMap owner_;
};

inline Ellipse random_ellipse(Rng& rng, double rmin, double rmax, int h, int w) {
  const double r = rng.uniform(rmin, rmax);
  return {rng.uniform(0, h), rng.uniform(0, w), r * rng.uniform(0.75, 1.0), r, rng.uniform(0, std::numbers::pi)};
}

}  // namespace detail

// Generates one image. Throws DataError after 1000 failed placement attempts.
inline SyntheticImage generate_synthetic_image(const SyntheticSpec& spec, Rng& rng, const std::string& name) {
  const int h = spec.height, w = spec.width;
  const int n = rng.uniform_int(spec.min_cells, spec.max_cells);
  const int pairs = static_cast<int>(std::lround(spec.clump_fraction * n / 2.0));
  const int n_small = std::min(n - 2 * pairs, static_cast<int>(std::lround(spec.small_fraction * n)));

  detail::Canvas canvas(h, w);
  std::vector<bool> small, clumped;
  int attempts = 0;
  auto fail = [&] {
    if (++attempts >= 1000) {
      throw DataError("infeasible cell packing for " + name + " after 1000 placement attempts");
    }
  };
  auto place_free = [&](double rmin, double rmax) {
    for (;;) {
      const auto px = detail::rasterize(detail::random_ellipse(rng, rmin, rmax, h, w), h, w);
      if (!px.empty() && canvas.neighbours(px).empty()) return px;
      fail();
    }
  };

  for (int p = 0; p < pairs; ++p) {
    for (;;) {
      const auto a = place_free(spec.min_radius, spec.max_radius);
      // Partner: slide outwards from A's centre along a random ray until it
      // no longer overlaps A; it must then touch A and nothing else.
      double cy = 0, cx = 0;
      for (const auto i : a) {
        cy += static_cast<double>(i / w);
        cx += static_cast<double>(i % w);
      }
      cy /= static_cast<double>(a.size());
      cx /= static_cast<double>(a.size());
      auto b_shape = detail::random_ellipse(rng, spec.min_radius, spec.max_radius, h, w);
      const double phi = rng.uniform(0, 2 * std::numbers::pi);
      const int id_a = 2 * p + 1;
      canvas.paint(a, id_a);
      std::vector<std::size_t> b;
      for (double d = 0.5;; d += 0.5) {
        b_shape.cy = cy + d * std::sin(phi);
        b_shape.cx = cx + d * std::cos(phi);
        b = detail::rasterize(b_shape, h, w);
        if (b.empty() || !canvas.overlaps(b)) break;
      }
      const auto nb = canvas.neighbours(b);
      if (!b.empty() && nb.size() == 1 && nb[0] == id_a) {
        canvas.paint(b, id_a + 1);
        break;
      }
      canvas.paint(a, 0);
      fail();
    }
    small.insert(small.end(), 2, false);
    clumped.insert(clumped.end(), 2, true);
  }
  for (int i = 2 * pairs; i < n; ++i) {
    const bool is_small = i - 2 * pairs < n_small;
    const auto px = is_small ? place_free(spec.small_min_radius, spec.small_max_radius)
                             : place_free(spec.min_radius, spec.max_radius);
    canvas.paint(px, i + 1);
    small.push_back(is_small);
    clumped.push_back(false);
  }

  // Renumber in raster order and carry the per-cell flags along.
  SyntheticImage out{name, Tensor<float>({1, 3, h, w}), renumber_raster(canvas.owners()), {}, {}, {}};
  const int k = instance_count(out.instances);
  out.small.assign(k, false);
  out.clumped.assign(k, false);
  for (std::size_t i = 0; i < out.instances.size(); ++i) {
    if (!out.instances[i]) continue;
    out.small[out.instances[i] - 1] = small[canvas.owners()[i] - 1];
    out.clumped[out.instances[i] - 1] = clumped[canvas.owners()[i] - 1];
  }

  // Centroid points, snapped into the instance when rounding leaves it.
  const auto px = instance_pixels(out.instances);
  for (int id = 1; id <= k; ++id) {
    double sr = 0, sc = 0;
    for (const auto i : px[id]) {
      sr += static_cast<double>(i / w);
      sc += static_cast<double>(i % w);
    }
    const double m = static_cast<double>(px[id].size());
    int r = static_cast<int>(std::lround(sr / m)), c = static_cast<int>(std::lround(sc / m));
    if (out.instances.at(r, c) != id) {
      int best = h + w;
      for (const auto i : px[id]) {
        const int d = std::abs(static_cast<int>(i / w) - r) + std::abs(static_cast<int>(i % w) - c);
        if (d < best) {
          best = d;
          r = static_cast<int>(i / w);
          c = static_cast<int>(i % w);
        }
      }
    }
    out.points.points.push_back({r, c});
  }

  // Per-cell shade jitter, then additive noise.
  std::vector<float> shade(static_cast<std::size_t>(k) + 1, 1.0f);
  for (int id = 1; id <= k; ++id) shade[id] = static_cast<float>(rng.uniform(0.85, 1.0));
  for (int ch = 0; ch < 3; ++ch) {
    float* dst = out.image.channel_ptr(0, ch);
    for (std::size_t i = 0; i < out.instances.size(); ++i) {
      const int id = out.instances[i];
      const float base = id ? kNucleusColor[ch] * shade[id] : kBackgroundColor[ch];
      const float noise = spec.noise > 0 ? static_cast<float>(spec.noise * rng.normal()) : 0.0f;
      dst[i] = std::clamp(base + noise, 0.0f, 1.0f);
    }
  }
  return out;
}

// Deterministic per seed; image i is named "synth_%03d".
inline std::vector<SyntheticImage> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<SyntheticImage> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    Rng local(rng.fork_seed());
    std::string name = std::to_string(i);
    name = "synth_" + std::string(3 - std::min<std::size_t>(3, name.size()), '0') + name;
    out.push_back(generate_synthetic_image(spec, local, name));
  }
  return out;
}

}  // namespace splitexpand
