#pragma once

// PNG images (8-bit RGB, 8-bit gray, 16-bit instance maps) via libpng, point
// annotations as `row,col` CSV, and the on-disk dataset layout
// images/*.png, points/*.csv, optional masks/*.png.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "grid.hpp"
#include "labels.hpp"
#include "tensor.hpp"

namespace splitexpand {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  return f;
}

// Decoded PNG: `channels` interleaved samples of `bit_depth` 8 or 16 bits.
struct PngPixels {
  int height = 0, width = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;
};

inline PngPixels read_png(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  PngPixels px;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "' is not a readable PNG");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if ((color & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);  // native little-endian samples
  png_read_update_info(png, info);
  px.height = static_cast<int>(png_get_image_height(png, info));
  px.width = static_cast<int>(png_get_image_width(png, info));
  px.channels = png_get_channels(png, info);
  px.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * px.height);
  rows.resize(px.height);
  for (int r = 0; r < px.height; ++r) rows[r] = buf.data() + stride * r;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(px.height) * px.width * px.channels;
  px.samples.resize(n);
  if (px.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) px.samples[i] = static_cast<std::uint16_t>(buf[2 * i] | (buf[2 * i + 1] << 8));
  } else {
    for (std::size_t i = 0; i < n; ++i) px.samples[i] = buf[i];
  }
  return px;
}

inline void write_png(const std::filesystem::path& path, const PngPixels& px) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  const std::size_t bytes = px.bit_depth / 8;
  const std::size_t stride = static_cast<std::size_t>(px.width) * px.channels * bytes;
  std::vector<png_byte> buf(stride * px.height);
  for (std::size_t i = 0; i < px.samples.size(); ++i) {
    if (bytes == 2) {
      buf[2 * i] = static_cast<png_byte>(px.samples[i] >> 8);  // PNG is big-endian
      buf[2 * i + 1] = static_cast<png_byte>(px.samples[i] & 0xff);
    } else {
      buf[i] = static_cast<png_byte>(px.samples[i]);
    }
  }
  std::vector<png_bytep> rows(px.height);
  for (int r = 0; r < px.height; ++r) rows[r] = buf.data() + stride * r;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, px.width, px.height, px.bit_depth, px.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

// RGB image as a 1x3xHxW tensor in [0,1]; gray images are replicated.
inline Tensor<float> read_rgb_png(const std::filesystem::path& path) {
  const auto px = detail::read_png(path);
  const float scale = px.bit_depth == 16 ? 65535.0f : 255.0f;
  Tensor<float> img({1, 3, px.height, px.width});
  const std::size_t plane = static_cast<std::size_t>(px.height) * px.width;
  for (int ch = 0; ch < 3; ++ch) {
    float* dst = img.channel_ptr(0, ch);
    const int src = px.channels >= 3 ? ch : 0;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>(px.samples[i * px.channels + src]) / scale;
  }
  return img;
}

inline void write_rgb_png(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.rank() != 4 || img.batch() != 1 || img.channels() != 3) {
    throw ShapeError("png", "expected 1x3xHxW, got " + dims_string(img.dims()));
  }
  detail::PngPixels px{img.height(), img.width(), 3, 8, {}};
  const std::size_t plane = img.plane();
  px.samples.resize(plane * 3);
  for (int ch = 0; ch < 3; ++ch) {
    const float* src = img.channel_ptr(0, ch);
    for (std::size_t i = 0; i < plane; ++i) {
      px.samples[i * 3 + ch] = static_cast<std::uint16_t>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
    }
  }
  detail::write_png(path, px);
}

// 8-bit gray rendering of values in [0,1].
inline void write_gray_png(const std::filesystem::path& path, const Grid<float>& g) {
  detail::PngPixels px{g.height, g.width, 1, 8, std::vector<std::uint16_t>(g.size())};
  for (std::size_t i = 0; i < g.size(); ++i) {
    px.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(g[i], 0.0f, 1.0f) * 255.0f));
  }
  detail::write_png(path, px);
}

// Instance map from an 8- or 16-bit single-channel PNG (sample = instance ID).
inline InstanceMap read_instance_png(const std::filesystem::path& path) {
  const auto px = detail::read_png(path);
  if (px.channels != 1) throw DataError("instance map '" + path.string() + "' must be single-channel");
  InstanceMap m(px.height, px.width, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = px.samples[i];
  return m;
}

inline void write_instance_png(const std::filesystem::path& path, const InstanceMap& m) {
  if (instance_count(m) > 65535) throw DataError("more than 65535 instances cannot be stored in a 16-bit PNG");
  detail::PngPixels px{m.height, m.width, 1, 16, std::vector<std::uint16_t>(m.size())};
  for (std::size_t i = 0; i < m.size(); ++i) px.samples[i] = static_cast<std::uint16_t>(std::max(0, m[i]));
  detail::write_png(path, px);
}

// Label map codes (0 background, 1 cell, 255 ignore) as 8-bit gray.
inline void write_label_png(const std::filesystem::path& path, const LabelMap& l) {
  detail::PngPixels px{l.height, l.width, 1, 8, std::vector<std::uint16_t>(l.codes.begin(), l.codes.end())};
  detail::write_png(path, px);
}

// `row,col` per line; an optional non-numeric header line is skipped.
inline PointAnnotation read_points_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  PointAnnotation pts;
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    int r = 0, c = 0;
    char comma = 0;
    if (!(ls >> r >> comma >> c) || comma != ',') {
      if (lineno == 1) continue;  // header
      throw DataError("'" + path.string() + "' line " + std::to_string(lineno) + ": expected row,col");
    }
    pts.points.push_back({r, c});
  }
  return pts;
}

inline void write_points_csv(const std::filesystem::path& path, const PointAnnotation& pts) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << "row,col\n";
  for (const auto& p : pts.points) os << p.row << ',' << p.col << '\n';
}

// RGB overlay with instance boundaries (pixels with a 4-neighbour of another
// ID) painted in `color`.
inline Tensor<float> boundary_overlay(const Tensor<float>& img, const InstanceMap& m,
                                      const std::array<float, 3>& color = {0.0f, 1.0f, 0.0f}) {
  Tensor<float> out = img;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const int id = m.at(r, c);
      if (!id) continue;
      bool edge = false;
      for (const auto& [dy, dx] : {std::pair{-1, 0}, std::pair{1, 0}, std::pair{0, -1}, std::pair{0, 1}}) {
        edge |= !m.contains(r + dy, c + dx) || m.at(r + dy, c + dx) != id;
      }
      if (!edge) continue;
      for (int ch = 0; ch < 3; ++ch) out.at(0, ch, r, c) = color[ch];
    }
  return out;
}

struct DatasetEntry {
  std::string name;
  std::filesystem::path image;
  std::filesystem::path points;
  std::optional<std::filesystem::path> mask;
};

// Entries sorted by name; every image needs a matching points file.
inline std::vector<DatasetEntry> list_dataset(const std::filesystem::path& root) {
  const auto images = root / "images";
  if (!std::filesystem::is_directory(images)) throw DataError("dataset '" + root.string() + "' has no images/ directory");
  std::vector<DatasetEntry> out;
  for (const auto& e : std::filesystem::directory_iterator(images)) {
    if (e.path().extension() != ".png") continue;
    const std::string name = e.path().stem().string();
    DatasetEntry d{name, e.path(), root / "points" / (name + ".csv"), std::nullopt};
    if (!std::filesystem::exists(d.points)) throw DataError("image '" + name + "' has no points/" + name + ".csv");
    if (const auto mask = root / "masks" / (name + ".png"); std::filesystem::exists(mask)) d.mask = mask;
    out.push_back(std::move(d));
  }
  std::sort(out.begin(), out.end(), [](const DatasetEntry& a, const DatasetEntry& b) { return a.name < b.name; });
  return out;
}

}  // namespace splitexpand
