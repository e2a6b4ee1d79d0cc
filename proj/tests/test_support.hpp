#pragma once

// Test-only helpers: deterministic fixtures and naive reference
// implementations that do not share code with the library kernels.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <queue>
#include <set>
#include <vector>

#include "splitexpand/network.hpp"
#include "splitexpand/rng.hpp"
#include "splitexpand/tensor.hpp"

namespace splitexpand::testing {

template <typename T>
Tensor<T> random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> img({1, 3, h, w});
  for (auto& v : img.values()) v = static_cast<T>(rng.uniform());
  return img;
}

template <typename T>
NetworkModel<T> tiny_model(std::uint64_t seed, int depth = 2, int width = 4, RandomizeOptions opts = {}) {
  auto m = make_unet<T>(depth, width);
  randomize_model(m, seed, opts);
  return m;
}

// --- naive reference forward (double precision, index-checked) -------------

inline double ref_get(const Tensor<double>& t, int n, int c, int y, int x) {
  if (y < 0 || x < 0 || y >= t.height() || x >= t.width()) return 0.0;
  return t.at(n, c, y, x);
}

inline Tensor<double> ref_conv(const Tensor<double>& in, const Tensor<double>& w, const Tensor<double>& b) {
  const int k = w.dim(2), pad = k / 2;
  Tensor<double> out({1, w.dim(0), in.height(), in.width()});
  for (int o = 0; o < w.dim(0); ++o)
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) {
        double s = b[o];
        for (int c = 0; c < in.channels(); ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) s += w.at(o, c, ky, kx) * ref_get(in, 0, c, y + ky - pad, x + kx - pad);
        out.at(0, o, y, x) = s;
      }
  return out;
}

inline Tensor<double> ref_tconv(const Tensor<double>& in, const Tensor<double>& w, const Tensor<double>& b) {
  Tensor<double> out({1, w.dim(1), 2 * in.height(), 2 * in.width()});
  for (int o = 0; o < w.dim(1); ++o)
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) {
        double s = b[o];
        for (int c = 0; c < in.channels(); ++c) s += w.at(c, o, y % 2, x % 2) * in.at(0, c, y / 2, x / 2);
        out.at(0, o, y, x) = s;
      }
  return out;
}

// Inference-mode forward over the model graph using the naive kernels above.
inline std::map<std::string, Tensor<double>> ref_forward(const NetworkModel<double>& m, const Tensor<double>& image) {
  std::map<std::string, Tensor<double>> out;
  for (const auto& l : m.layers) {
    const Tensor<double>& in = l.input.empty() ? image : out.at(l.input);
    Tensor<double> y;
    switch (l.kind) {
      case LayerKind::conv3x3:
      case LayerKind::conv1x1: y = ref_conv(in, m.weight(l.name + ".w"), m.weight(l.name + ".b")); break;
      case LayerKind::transposed_conv2x2: y = ref_tconv(in, m.weight(l.name + ".w"), m.weight(l.name + ".b")); break;
      case LayerKind::batchnorm: {
        y = in;
        for (int c = 0; c < in.channels(); ++c) {
          const double g = m.weight(l.name + ".gamma")[c], be = m.weight(l.name + ".beta")[c];
          const double mu = m.weight(l.name + ".running_mean")[c], var = m.weight(l.name + ".running_var")[c];
          for (int yy = 0; yy < in.height(); ++yy)
            for (int x = 0; x < in.width(); ++x)
              y.at(0, c, yy, x) = g * (in.at(0, c, yy, x) - mu) / std::sqrt(var + 1e-5) + be;
        }
        break;
      }
      case LayerKind::relu:
        y = in;
        for (auto& v : y.values()) v = std::max(0.0, v);
        break;
      case LayerKind::maxpool2x2:
        y = Tensor<double>({1, in.channels(), in.height() / 2, in.width() / 2});
        for (int c = 0; c < in.channels(); ++c)
          for (int yy = 0; yy < y.height(); ++yy)
            for (int x = 0; x < y.width(); ++x)
              y.at(0, c, yy, x) = std::max({in.at(0, c, 2 * yy, 2 * x), in.at(0, c, 2 * yy, 2 * x + 1),
                                            in.at(0, c, 2 * yy + 1, 2 * x), in.at(0, c, 2 * yy + 1, 2 * x + 1)});
        break;
      case LayerKind::concat_skip: {
        const auto& s = out.at(*l.skip_source);
        y = Tensor<double>({1, in.channels() + s.channels(), in.height(), in.width()});
        for (int c = 0; c < y.channels(); ++c)
          for (int yy = 0; yy < y.height(); ++yy)
            for (int x = 0; x < y.width(); ++x)
              y.at(0, c, yy, x) = c < in.channels() ? in.at(0, c, yy, x) : s.at(0, c - in.channels(), yy, x);
        break;
      }
      case LayerKind::softmax_channel:
        y = in;
        for (int yy = 0; yy < in.height(); ++yy)
          for (int x = 0; x < in.width(); ++x) {
            const double a = in.at(0, 0, yy, x), b = in.at(0, 1, yy, x);
            y.at(0, 0, yy, x) = 1.0 / (1.0 + std::exp(b - a));
            y.at(0, 1, yy, x) = 1.0 / (1.0 + std::exp(a - b));
          }
        break;
    }
    out[l.name] = std::move(y);
  }
  return out;
}

// Bounding box [r0, r1] x [c0, c1] (inclusive) of input pixels that can
// influence the given output box, propagated structurally through the graph.
struct Box {
  int r0, r1, c0, c1;
  bool valid() const { return r0 <= r1 && c0 <= c1; }
};

inline Box box_union(const Box& a, const Box& b) {
  if (!a.valid()) return b;
  if (!b.valid()) return a;
  return {std::min(a.r0, b.r0), std::max(a.r1, b.r1), std::min(a.c0, b.c0), std::max(a.c1, b.c1)};
}

template <typename T>
Box receptive_field(const NetworkModel<T>& m, std::size_t from_layer, Box out_box) {
  std::vector<Box> boxes(m.layers.size(), Box{1, 0, 1, 0});
  boxes[from_layer] = out_box;
  Box image{1, 0, 1, 0};
  for (std::size_t i = from_layer + 1; i-- > 0;) {
    const Box b = boxes[i];
    if (!b.valid()) continue;
    const auto& l = m.layers[i];
    Box in = b;
    switch (l.kind) {
      case LayerKind::conv3x3: in = {b.r0 - 1, b.r1 + 1, b.c0 - 1, b.c1 + 1}; break;
      case LayerKind::maxpool2x2: in = {2 * b.r0, 2 * b.r1 + 1, 2 * b.c0, 2 * b.c1 + 1}; break;
      case LayerKind::transposed_conv2x2: in = {b.r0 / 2, b.r1 / 2, b.c0 / 2, b.c1 / 2}; break;
      default: break;
    }
    if (l.skip_source) {
      const auto s = m.index_of(*l.skip_source);
      boxes[s] = box_union(boxes[s], b);
    }
    if (l.input.empty()) {
      image = box_union(image, in);
    } else {
      const auto j = m.index_of(l.input);
      boxes[j] = box_union(boxes[j], in);
    }
  }
  return image;
}

// --- brute-force flood fill ------------------------------------------------

// Labels foreground components by BFS; labels numbered in raster order of the
// first pixel.
inline std::vector<int> flood_fill_labels(const std::vector<std::uint8_t>& fg, int h, int w, bool eight) {
  std::vector<int> lab(fg.size(), 0);
  int next = 0;
  for (int i = 0; i < h * w; ++i) {
    if (!fg[i] || lab[i]) continue;
    lab[i] = ++next;
    std::queue<int> q;
    q.push(i);
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      const int y = p / w, x = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if ((dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0)) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
          const int qi = yy * w + xx;
          if (fg[qi] && !lab[qi]) {
            lab[qi] = next;
            q.push(qi);
          }
        }
    }
  }
  return lab;
}

}  // namespace splitexpand::testing
