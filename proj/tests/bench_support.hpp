#pragma once

// Benchmark fixtures shared by the unit tests and the acceptance binary: a
// hand-set stain-detector network and a supersampled disk scene.

#include <cmath>
#include <vector>

#include "splitexpand/labels.hpp"
#include "splitexpand/network.hpp"

namespace splitexpand::testing {

// Blue-minus-red detector in enc1 channel 0, carried through identity taps to
// dec1; the CC head blurs it twice with positive 3x3 kernels.
inline NetworkModel<float> stain_detector_model() {
  auto m = make_unet<float>(2, 4);
  auto tap = [&](const std::string& layer, int o, int i, float v) { m.weight(layer + ".w").at(o, i, 1, 1) = v; };
  tap("enc1.conv1", 0, 2, 1.0f);
  tap("enc1.conv1", 0, 0, -1.0f);
  tap("enc1.conv2", 0, 0, 1.0f);
  tap("dec1.conv1", 0, 4, 1.0f);  // skip half of the concatenation
  tap("dec1.conv2", 0, 0, 1.0f);
  for (const char* l : {"cc.conv1", "cc.conv2"}) {
    auto& w = m.weight(std::string(l) + ".w");
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) w.at(0, 0, y, x) = 1.0f;
  }
  m.weight("cc.conv.w").at(1, 0, 0, 0) = 1.0f;
  m.weight("cc.conv.b")[1] = -5.0f;
  m.weight("seg.conv.w").at(1, 0, 0, 0) = 100.0f;
  m.weight("seg.conv.b")[1] = -5.0f;
  return m;
}

// Disk image: dark disks on bright ground with 1-px antialiased rims.
// Returns coverage per pixel (1 = fully inside a disk) via supersampling.
struct DiskScene {
  Tensor<float> image;
  std::vector<double> coverage;
  PointAnnotation points;
};

inline DiskScene disk_scene(int size, int spacing, double radius) {
  DiskScene s{Tensor<float>({1, 3, size, size}, 0.0f), std::vector<double>(size * size, 0.0), {}};
  for (int cy = spacing / 2; cy < size; cy += spacing)
    for (int cx = spacing / 2; cx < size; cx += spacing) s.points.points.push_back({cy, cx});
  constexpr int kSub = 8;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      int inside = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double y = r - 0.5 + (sy + 0.5) / kSub, x = c - 0.5 + (sx + 0.5) / kSub;
          for (const auto& p : s.points.points)
            if (std::hypot(y - p.row, x - p.col) <= radius) {
              ++inside;
              break;
            }
        }
      const double cov = static_cast<double>(inside) / (kSub * kSub);
      s.coverage[r * size + c] = cov;
      const float v = static_cast<float>(0.9 * (1.0 - cov) + 0.1 * cov);
      for (int ch = 0; ch < 3; ++ch) s.image.at(0, ch, r, c) = v;
    }
  }
  return s;
}

}  // namespace splitexpand::testing
