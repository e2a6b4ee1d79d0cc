#pragma once

// Row-major 2-D grids for masks and instance maps, and connected-component
// labeling.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"

namespace splitexpand {

template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * width + c; }
  bool contains(int r, int c) const { return r >= 0 && c >= 0 && r < height && c < width; }
  T& at(int r, int c) { return data[index(r, c)]; }
  const T& at(int r, int c) const { return data[index(r, c)]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Grid& o) const { return height == o.height && width == o.width; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

using Mask = Grid<std::uint8_t>;  // 0 / 1
using InstanceMap = Grid<int>;    // 0 = background, 1..K instances

template <typename A, typename B>
void check_same_shape(const Grid<A>& a, const Grid<B>& b, const std::string& what) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(what, std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                               std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

inline int instance_count(const InstanceMap& m) {
  return m.data.empty() ? 0 : std::max(0, *std::max_element(m.data.begin(), m.data.end()));
}

inline Mask foreground(const InstanceMap& m) {
  Mask out(m.height, m.width, 0);
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] > 0;
  return out;
}

// Pixel indices of each instance (index 0 unused).
inline std::vector<std::vector<std::size_t>> instance_pixels(const InstanceMap& m) {
  std::vector<std::vector<std::size_t>> px(static_cast<std::size_t>(instance_count(m)) + 1);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i] > 0) px[m[i]].push_back(i);
  return px;
}

// Labels the nonzero pixels of `mask` into components numbered 1..K in
// raster order of each component's first pixel.
template <typename T>
InstanceMap label_components(const Grid<T>& mask, bool eight_connected) {
  InstanceMap out(mask.height, mask.width, 0);
  std::vector<std::size_t> stack;
  int next = 0;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c) || out.at(r, c)) continue;
      ++next;
      out.at(r, c) = next;
      stack.assign(1, out.index(r, c));
      while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        const int y = static_cast<int>(i / mask.width), x = static_cast<int>(i % mask.width);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dy == 0 && dx == 0) || (!eight_connected && dy != 0 && dx != 0)) continue;
            const int yy = y + dy, xx = x + dx;
            if (!mask.contains(yy, xx) || !mask.at(yy, xx) || out.at(yy, xx)) continue;
            out.at(yy, xx) = next;
            stack.push_back(out.index(yy, xx));
          }
      }
    }
  }
  return out;
}

// Renumbers nonzero IDs to 1..K in raster order of first appearance.
inline InstanceMap renumber_raster(const InstanceMap& m) {
  InstanceMap out(m.height, m.width, 0);
  std::vector<int> remap(static_cast<std::size_t>(instance_count(m)) + 1, 0);
  int next = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] <= 0) continue;
    if (!remap[m[i]]) remap[m[i]] = ++next;
    out[i] = remap[m[i]];
  }
  return out;
}

// IDs 1..K are all present and there are no negative IDs.
inline bool is_contiguous(const InstanceMap& m) {
  const int k = instance_count(m);
  std::vector<bool> seen(static_cast<std::size_t>(k) + 1, false);
  for (const int v : m.data) {
    if (v < 0) return false;
    seen[v] = true;
  }
  for (int i = 1; i <= k; ++i)
    if (!seen[i]) return false;
  return true;
}

}  // namespace splitexpand
