#pragma once

// Forward kernels for the layer kinds used by the U-Net family. All kernels
// take and return NCHW tensors and accumulate in a fixed order, so results are
// bit-reproducible.

#include <algorithm>
#include <cmath>
#include <vector>

#include "tensor.hpp"

namespace splitexpand::kernels {

// Same-size convolution, stride 1, zero padding k/2. Weights (out, in, k, k).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const int n_batch = in.batch(), in_ch = in.channels(), h = in.height(), wd = in.width();
  const int out_ch = w.dim(0), k = w.dim(2), pad = k / 2;
  Tensor<T> out({n_batch, out_ch, h, wd});
  for (int n = 0; n < n_batch; ++n) {
    for (int o = 0; o < out_ch; ++o) {
      T* dst = out.channel_ptr(n, o);
      std::fill(dst, dst + out.plane(), b[o]);
      for (int c = 0; c < in_ch; ++c) {
        const T* src = in.channel_ptr(n, c);
        const T* wk = w.data().data() + (static_cast<std::size_t>(o) * in_ch + c) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
            const T wv = wk[ky * k + kx];
            for (int y = y0; y < y1; ++y) {
              T* d = dst + static_cast<std::size_t>(y) * wd;
              const T* s = src + static_cast<std::ptrdiff_t>(y + dy) * wd + dx;
              for (int x = x0; x < x1; ++x) d[x] += wv * s[x];
            }
          }
        }
      }
    }
  }
  return out;
}

// 2x2 stride-2 transposed convolution. Weights (in, out, 2, 2).
template <typename T>
Tensor<T> transposed_conv2x2(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b) {
  const int n_batch = in.batch(), in_ch = in.channels(), h = in.height(), wd = in.width();
  const int out_ch = w.dim(1);
  Tensor<T> out({n_batch, out_ch, 2 * h, 2 * wd});
  const int ow = 2 * wd;
  for (int n = 0; n < n_batch; ++n) {
    for (int o = 0; o < out_ch; ++o) {
      T* dst = out.channel_ptr(n, o);
      std::fill(dst, dst + out.plane(), b[o]);
      for (int c = 0; c < in_ch; ++c) {
        const T* src = in.channel_ptr(n, c);
        const T* wk = w.data().data() + (static_cast<std::size_t>(c) * out_ch + o) * 4;
        for (int a = 0; a < 2; ++a) {
          for (int bb = 0; bb < 2; ++bb) {
            const T wv = wk[a * 2 + bb];
            for (int y = 0; y < h; ++y) {
              T* d = dst + static_cast<std::size_t>(2 * y + a) * ow + bb;
              const T* s = src + static_cast<std::size_t>(y) * wd;
              for (int x = 0; x < wd; ++x) d[2 * x] += wv * s[x];
            }
          }
        }
      }
    }
  }
  return out;
}

// Per-channel affine y = x * scale + shift (batchnorm after folding).
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& in, const std::vector<T>& scale, const std::vector<T>& shift) {
  Tensor<T> out(in.dims());
  for (int n = 0; n < in.batch(); ++n) {
    for (int c = 0; c < in.channels(); ++c) {
      const T* s = in.channel_ptr(n, c);
      T* d = out.channel_ptr(n, c);
      for (std::size_t i = 0; i < in.plane(); ++i) d[i] = s[i] * scale[c] + shift[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& in) {
  Tensor<T> out(in.dims());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
  return out;
}

// Index (within the 2x2 window, raster order) of the first maximum.
template <typename T>
inline int window_argmax(const T* src, int w, int y, int x) {
  const T v[4] = {src[(2 * y) * w + 2 * x], src[(2 * y) * w + 2 * x + 1], src[(2 * y + 1) * w + 2 * x],
                  src[(2 * y + 1) * w + 2 * x + 1]};
  int best = 0;
  for (int i = 1; i < 4; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& in) {
  const int h = in.height() / 2, w = in.width() / 2;
  Tensor<T> out({in.batch(), in.channels(), h, w});
  for (int n = 0; n < in.batch(); ++n) {
    for (int c = 0; c < in.channels(); ++c) {
      const T* src = in.channel_ptr(n, c);
      T* dst = out.channel_ptr(n, c);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int a = window_argmax(src, in.width(), y, x);
          dst[y * w + x] = src[(2 * y + a / 2) * in.width() + 2 * x + a % 2];
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& first, const Tensor<T>& second) {
  Tensor<T> out({first.batch(), first.channels() + second.channels(), first.height(), first.width()});
  for (int n = 0; n < first.batch(); ++n) {
    std::copy_n(first.channel_ptr(n, 0), first.plane() * first.channels(), out.channel_ptr(n, 0));
    std::copy_n(second.channel_ptr(n, 0), second.plane() * second.channels(), out.channel_ptr(n, first.channels()));
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& in) {
  Tensor<T> out(in.dims());
  const int ch = in.channels();
  std::vector<T> e(ch);
  for (int n = 0; n < in.batch(); ++n) {
    for (std::size_t p = 0; p < in.plane(); ++p) {
      T m = in.channel_ptr(n, 0)[p];
      for (int c = 1; c < ch; ++c) m = std::max(m, in.channel_ptr(n, c)[p]);
      T sum{};
      for (int c = 0; c < ch; ++c) {
        e[c] = std::exp(in.channel_ptr(n, c)[p] - m);
        sum += e[c];
      }
      for (int c = 0; c < ch; ++c) out.channel_ptr(n, c)[p] = e[c] / sum;
    }
  }
  return out;
}

}  // namespace splitexpand::kernels
