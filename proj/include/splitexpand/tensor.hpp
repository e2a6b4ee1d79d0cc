#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace splitexpand {

// Dense row-major tensor. Activations are NCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<int> dims, T fill = T{}) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(count(dims_), fill);
  }

  Tensor(std::vector<int> dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != count(dims_)) {
      throw ConfigError("tensor payload has " + std::to_string(data_.size()) + " values, dims imply " +
                        std::to_string(count(dims_)));
    }
  }

  static std::size_t count(const std::vector<int>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }

  const std::vector<int>& dims() const noexcept { return dims_; }
  int dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // NCHW accessors; only meaningful for rank-4 tensors.
  int batch() const { return dims_.at(0); }
  int channels() const { return dims_.at(1); }
  int height() const { return dims_.at(2); }
  int width() const { return dims_.at(3); }
  std::size_t plane() const { return static_cast<std::size_t>(dims_.at(2)) * dims_.at(3); }

  T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  T* channel_ptr(int n, int c) { return data_.data() + offset(n, c, 0, 0); }
  const T* channel_ptr(int n, int c) const { return data_.data() + offset(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T sum() const {
    T s{};
    for (const T v : data_) s += v;
    return s;
  }

  T max_abs() const {
    T m{};
    for (const T v : data_) m = std::max(m, static_cast<T>(std::abs(v)));
    return m;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(dims_, std::move(out));
  }

  bool same_dims(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.dims_ == b.dims_ && a.data_ == b.data_; }

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * dims_[1] + c) * dims_[2] + y) * dims_[3] + x;
  }

  void check_dims() const {
    for (const int d : dims_) {
      if (d <= 0) throw ConfigError("tensor dims must be positive");
    }
  }

  std::vector<int> dims_;
  std::vector<T> data_;
};

inline std::string dims_string(const std::vector<int>& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// SETN tensor file format
//
//   bytes 0-3  magic "SETN"
//   byte  4    version (1)
//   byte  5    dtype (0 = f32 little-endian)
//   bytes 6-7  reserved, zero
//   u32 LE     ndim
//   ndim x u32 dims
//   row-major payload
// ---------------------------------------------------------------------------

namespace setn {

inline constexpr std::array<char, 4> kMagic{'S', 'E', 'T', 'N'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
  return true;
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline bool get_f32(std::istream& is, float& f) {
  std::uint32_t u;
  if (!get_u32(is, u)) return false;
  f = std::bit_cast<float>(u);
  return true;
}

// Raw f32 LE array without header (used by weights.bin).
inline void write_raw_f32(std::ostream& os, std::span<const float> values) {
  for (const float v : values) put_f32(os, v);
}

inline void write(std::ostream& os, const Tensor<float>& t) {
  os.write(kMagic.data(), 4);
  const char hdr[4] = {static_cast<char>(kVersion), static_cast<char>(kDtypeF32), 0, 0};
  os.write(hdr, 4);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (const int d : t.dims()) put_u32(os, static_cast<std::uint32_t>(d));
  write_raw_f32(os, t.data());
}

inline Tensor<float> read(std::istream& is) {
  using K = ModelFormatError::Kind;
  char magic[4];
  if (!is.read(magic, 4)) throw ModelFormatError(K::truncated, "SETN: truncated header");
  if (!std::equal(magic, magic + 4, kMagic.begin())) throw ModelFormatError(K::bad_magic, "SETN: bad magic");
  unsigned char hdr[4];
  if (!is.read(reinterpret_cast<char*>(hdr), 4)) throw ModelFormatError(K::truncated, "SETN: truncated header");
  if (hdr[0] != kVersion) {
    throw ModelFormatError(K::bad_version, "SETN: unsupported version " + std::to_string(hdr[0]));
  }
  if (hdr[1] != kDtypeF32) throw ModelFormatError(K::bad_dtype, "SETN: unsupported dtype " + std::to_string(hdr[1]));
  std::uint32_t ndim = 0;
  if (!get_u32(is, ndim)) throw ModelFormatError(K::truncated, "SETN: truncated header");
  if (ndim == 0 || ndim > 8) throw ModelFormatError(K::dim_mismatch, "SETN: bad ndim " + std::to_string(ndim));
  std::vector<int> dims(ndim);
  for (auto& d : dims) {
    std::uint32_t v = 0;
    if (!get_u32(is, v)) throw ModelFormatError(K::truncated, "SETN: truncated dims");
    if (v == 0 || v > (1u << 30)) throw ModelFormatError(K::dim_mismatch, "SETN: bad dim " + std::to_string(v));
    d = static_cast<int>(v);
  }
  std::vector<float> data(Tensor<float>::count(dims));
  for (auto& f : data) {
    if (!get_f32(is, f)) throw ModelFormatError(K::truncated, "SETN: truncated payload");
  }
  return Tensor<float>(std::move(dims), std::move(data));
}

inline void save(const std::string& path, const Tensor<float>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ModelFormatError(ModelFormatError::Kind::io, "cannot open '" + path + "' for writing");
  write(os, t);
  if (!os) throw ModelFormatError(ModelFormatError::Kind::io, "write failed for '" + path + "'");
}

inline Tensor<float> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ModelFormatError(ModelFormatError::Kind::io, "cannot open '" + path + "'");
  return read(is);
}

}  // namespace setn
}  // namespace splitexpand
