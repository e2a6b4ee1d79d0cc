#pragma once

// Layer-wise relevance propagation with the alpha-1 (alpha=1, beta=0) rule.
//
// Linear layers redistribute relevance in proportion to the positive
// contributions z_ij = x_i * w_ij:
//
//   R_i = sum_j  z_ij^+ / (sum_i' z_i'j^+ + eps) * R_j,   eps = 1e-9
//
// Biases never enter the denominator. Batchnorm is canonized into the
// preceding convolution (its per-channel scale multiplies the conv weights),
// so BN layers pass relevance through unchanged, as do ReLUs. Max-pooling
// routes each output's relevance to its argmax input.

#include <optional>
#include <utility>
#include <vector>

#include "network.hpp"

namespace splitexpand {

inline constexpr double kLrpEpsilon = 1e-9;

struct OutputTarget {
  Head head = Head::cc;
  std::vector<std::pair<int, int>> pixels;  // (row, col)
  int class_index = 1;
};

template <typename T>
std::size_t logits_layer(const NetworkModel<T>& m, Head head) {
  return head == Head::seg ? m.seg_logits() : m.cc_logits();
}

// Relevance at the target head's pre-softmax scores: max(0, score) of the
// target class at each target pixel, zero elsewhere.
template <typename T>
Tensor<T> init_relevance(const NetworkModel<T>& m, const ActivationTrace<T>& tr, const OutputTarget& target) {
  if (target.pixels.empty()) throw ConfigError("explanation target has no pixels");
  const Tensor<T>& logits = tr.output(logits_layer(m, target.head));
  if (target.class_index < 0 || target.class_index >= logits.channels()) {
    throw ConfigError("explanation target class " + std::to_string(target.class_index) + " out of range");
  }
  Tensor<T> r(logits.dims());
  for (const auto& [row, col] : target.pixels) {
    if (row < 0 || col < 0 || row >= logits.height() || col >= logits.width()) {
      throw ConfigError("explanation target pixel (" + std::to_string(row) + "," + std::to_string(col) +
                        ") out of bounds");
    }
    const T s = logits.at(0, target.class_index, row, col);
    r.at(0, target.class_index, row, col) = s > T{0} ? s : T{0};
  }
  return r;
}

namespace detail {

// Alpha-1 rule for a same-size convolution with optional per-output-channel
// weight scale (canonized batchnorm).
template <typename T>
Tensor<T> lrp_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& r_out, const std::vector<T>* scale,
                   T* dropped) {
  const int n_batch = x.batch(), in_ch = x.channels(), h = x.height(), wd = x.width();
  const int out_ch = w.dim(0), k = w.dim(2), pad = k / 2;
  Tensor<T> den(r_out.dims());
  Tensor<T> r_in(x.dims());
  // pass 0 accumulates denominators, pass 1 redistributes
  for (int pass = 0; pass < 2; ++pass) {
    Tensor<T> ratio;
    if (pass == 1) {
      ratio = Tensor<T>(r_out.dims());
      for (std::size_t i = 0; i < den.size(); ++i) {
        ratio[i] = r_out[i] / (den[i] + static_cast<T>(kLrpEpsilon));
        if (dropped && den[i] == T{0}) *dropped += r_out[i];
      }
    }
    for (int n = 0; n < n_batch; ++n) {
      for (int o = 0; o < out_ch; ++o) {
        const T s_o = scale ? (*scale)[o] : T{1};
        for (int c = 0; c < in_ch; ++c) {
          const T* src = x.channel_ptr(n, c);
          const T* wk = w.data().data() + (static_cast<std::size_t>(o) * in_ch + c) * k * k;
          for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            for (int kx = 0; kx < k; ++kx) {
              const int dx = kx - pad;
              const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
              const T wv = wk[ky * k + kx] * s_o;
              for (int y = y0; y < y1; ++y) {
                const std::size_t orow = static_cast<std::size_t>(y) * wd;
                const std::size_t irow = static_cast<std::size_t>(y + dy) * wd;
                if (pass == 0) {
                  T* d = den.channel_ptr(n, o) + orow;
                  for (int xx = x0; xx < x1; ++xx) {
                    const T z = src[irow + xx + dx] * wv;
                    if (z > T{0}) d[xx] += z;
                  }
                } else {
                  const T* q = ratio.channel_ptr(n, o) + orow;
                  T* ri = r_in.channel_ptr(n, c) + irow;
                  for (int xx = x0; xx < x1; ++xx) {
                    const T z = src[irow + xx + dx] * wv;
                    if (z > T{0}) ri[xx + dx] += z * q[xx];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return r_in;
}

template <typename T>
Tensor<T> lrp_transposed_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& r_out,
                              const std::vector<T>* scale, T* dropped) {
  const int n_batch = x.batch(), in_ch = x.channels(), h = x.height(), wd = x.width();
  const int out_ch = w.dim(1), ow = 2 * wd;
  Tensor<T> den(r_out.dims());
  Tensor<T> r_in(x.dims());
  for (int pass = 0; pass < 2; ++pass) {
    Tensor<T> ratio;
    if (pass == 1) {
      ratio = Tensor<T>(r_out.dims());
      for (std::size_t i = 0; i < den.size(); ++i) {
        ratio[i] = r_out[i] / (den[i] + static_cast<T>(kLrpEpsilon));
        if (dropped && den[i] == T{0}) *dropped += r_out[i];
      }
    }
    for (int n = 0; n < n_batch; ++n) {
      for (int o = 0; o < out_ch; ++o) {
        const T s_o = scale ? (*scale)[o] : T{1};
        for (int c = 0; c < in_ch; ++c) {
          const T* src = x.channel_ptr(n, c);
          const T* wk = w.data().data() + (static_cast<std::size_t>(c) * out_ch + o) * 4;
          for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
              const T wv = wk[a * 2 + b] * s_o;
              for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < wd; ++xx) {
                  const T z = src[y * wd + xx] * wv;
                  if (z <= T{0}) continue;
                  const std::size_t oi = static_cast<std::size_t>(2 * y + a) * ow + 2 * xx + b;
                  if (pass == 0) {
                    den.channel_ptr(n, o)[oi] += z;
                  } else {
                    r_in.channel_ptr(n, c)[y * wd + xx] += z * ratio.channel_ptr(n, o)[oi];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
  return r_in;
}

template <typename T>
Tensor<T> lrp_maxpool(const Tensor<T>& x, const Tensor<T>& r_out) {
  Tensor<T> r_in(x.dims());
  const int h = r_out.height(), w = r_out.width();
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < x.channels(); ++c) {
      const T* src = x.channel_ptr(n, c);
      const T* r = r_out.channel_ptr(n, c);
      T* ri = r_in.channel_ptr(n, c);
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          const int a = kernels::window_argmax(src, x.width(), y, xx);
          ri[(2 * y + a / 2) * x.width() + 2 * xx + a % 2] += r[y * w + xx];
        }
      }
    }
  }
  return r_in;
}

}  // namespace detail

// One alpha-1 step through `layer`. `input` is the layer's forward input (for
// concat_skip, the concatenated tensor; the caller splits channel ranges).
// `bn_scale` is the per-channel scale of a batchnorm that follows a linear
// layer and is folded into its weights.
//
// `dropped`, when given, accumulates the relevance of outputs that have no
// positive contributor and are therefore lost.
template <typename T>
Tensor<T> lrp_alpha1_layer(const LayerSpec& layer, const Tensor<T>& input, const Tensor<T>& relevance_out,
                           const WeightMap<T>& weights, const std::vector<T>* bn_scale = nullptr,
                           T* dropped = nullptr) {
  switch (layer.kind) {
    case LayerKind::conv3x3:
    case LayerKind::conv1x1:
      return detail::lrp_conv(input, weights.at(layer.name + ".w"), relevance_out, bn_scale, dropped);
    case LayerKind::transposed_conv2x2:
      return detail::lrp_transposed_conv(input, weights.at(layer.name + ".w"), relevance_out, bn_scale, dropped);
    case LayerKind::maxpool2x2: return detail::lrp_maxpool(input, relevance_out);
    case LayerKind::batchnorm:
    case LayerKind::relu:
    case LayerKind::concat_skip: return relevance_out;
    case LayerKind::softmax_channel: break;
  }
  throw ConfigError("no alpha-1 rule for layer '" + layer.name + "' of kind " + std::string(to_string(layer.kind)));
}

namespace detail {

template <typename T>
std::optional<std::vector<T>> folded_bn_scale(const NetworkModel<T>& m, const ActivationTrace<T>& tr, std::size_t i) {
  const auto& name = m.layers[i].name;
  for (std::size_t j = i + 1; j < m.layers.size(); ++j) {
    const auto& l = m.layers[j];
    if (l.kind != LayerKind::batchnorm || l.input != name) continue;
    std::vector<T> mean, var, scale, shift;
    if (tr.mode == BnMode::training) {
      mean = tr.bn_stats[j].mean;
      var = tr.bn_stats[j].var;
    } else {
      mean = running_values(m, l.name + ".running_mean");
      var = running_values(m, l.name + ".running_var");
    }
    batchnorm_fold(m.weight(l.name + ".gamma"), m.weight(l.name + ".beta"), mean, var, scale, shift);
    return scale;
  }
  return std::nullopt;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// Relevance at the output of `stop_layer`, or at the 1x3xHxW input image when
// no stop layer is given. `dropped` receives the total relevance lost at
// outputs without positive contributors.
template <typename T>
Tensor<T> propagate_relevance(const NetworkModel<T>& m, const ActivationTrace<T>& tr, const Tensor<T>& initial,
                              Head head, std::optional<std::size_t> stop_layer = std::nullopt,
                              T* dropped = nullptr) {
  const std::size_t start = logits_layer(m, head);
  const Section own = head == Head::seg ? Section::seg_head : Section::cc_head;
  if (stop_layer) {
    const auto& sl = m.layers.at(*stop_layer);
    if (sl.section != Section::trunk && sl.section != own) {
      throw ConfigError("stop layer '" + sl.name + "' is not on the path of the " +
                        std::string(head == Head::seg ? "seg" : "cc") + " head");
    }
    if (*stop_layer > start) throw ConfigError("stop layer '" + sl.name + "' lies after the head's logits");
  }

  std::vector<Tensor<T>> rel(m.layers.size());
  Tensor<T> rel_image;
  rel[start] = initial;
  const std::size_t lowest = stop_layer ? *stop_layer : 0;
  for (std::size_t i = start + 1; i-- > lowest;) {
    if (stop_layer && i == *stop_layer) break;
    if (rel[i].empty()) continue;
    const auto& l = m.layers[i];
    const Tensor<T>& in = layer_input(m, tr, i);
    Tensor<T> r_in;
    if (l.kind == LayerKind::concat_skip) {
      r_in = Tensor<T>(in.dims());
      Tensor<T> r_skip(layer_skip(m, tr, i).dims());
      const int first = in.channels();
      for (int n = 0; n < in.batch(); ++n) {
        std::copy_n(rel[i].channel_ptr(n, 0), in.plane() * first, r_in.channel_ptr(n, 0));
        std::copy_n(rel[i].channel_ptr(n, first), in.plane() * r_skip.channels(), r_skip.channel_ptr(n, 0));
      }
      detail::accumulate(rel[m.index_of(*l.skip_source)], r_skip);
    } else {
      const auto scale = l.is_linear() ? detail::folded_bn_scale(m, tr, i) : std::nullopt;
      r_in = lrp_alpha1_layer(l, in, rel[i], m.weights, scale ? &*scale : nullptr, dropped);
    }
    if (l.input.empty()) {
      detail::accumulate(rel_image, r_in);
    } else {
      detail::accumulate(rel[m.index_of(l.input)], r_in);
    }
    rel[i] = Tensor<T>();
  }
  if (stop_layer) {
    return rel[*stop_layer].empty() ? Tensor<T>(tr.output(*stop_layer).dims()) : rel[*stop_layer];
  }
  return rel_image.empty() ? Tensor<T>(tr.image.dims()) : rel_image;
}

// Sums a 1xCxHxW relevance tensor over channels into an HxW heatmap.
template <typename T>
Tensor<T> channel_sum_heatmap(const Tensor<T>& r) {
  Tensor<T> h({r.height(), r.width()});
  for (int c = 0; c < r.channels(); ++c) {
    const T* p = r.channel_ptr(0, c);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += p[i];
  }
  return h;
}

// Explains `target`. With a stop layer, returns relevance shaped like that
// layer's output; otherwise returns the HxW input heatmap.
template <typename T>
Tensor<T> explain(const NetworkModel<T>& m, const ActivationTrace<T>& tr, const OutputTarget& target,
                  const std::optional<std::string>& stop_layer = std::nullopt) {
  const Tensor<T> init = init_relevance(m, tr, target);
  if (stop_layer) return propagate_relevance(m, tr, init, target.head, feature_layer(m, *stop_layer));
  return channel_sum_heatmap(propagate_relevance(m, tr, init, target.head));
}

// Relevance at the 1x3xHxW input image, before the channel reduction.
template <typename T>
Tensor<T> explain_input(const NetworkModel<T>& m, const ActivationTrace<T>& tr, const OutputTarget& target) {
  return propagate_relevance(m, tr, init_relevance(m, tr, target), target.head);
}

}  // namespace splitexpand
