#pragma once

// Reverse-mode gradients for the U-Net layer graph and for the combined
// training objective (loss_seg + loss_cc). The FRW weights are constants
// (stop-gradient): the re-weighted branch contributes w * dL/df_hat at the
// re-weighted layer.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "losses.hpp"
#include "network.hpp"

namespace splitexpand {

template <typename T>
using Gradients = WeightMap<T>;

// Trainable arrays of a layer; batchnorm running statistics are buffers.
inline std::vector<WeightSpec> trainable_specs(const LayerSpec& l) {
  std::vector<WeightSpec> out;
  for (auto& s : weight_specs(l)) {
    if (s.name.ends_with(".running_mean") || s.name.ends_with(".running_var")) continue;
    out.push_back(std::move(s));
  }
  return out;
}

// Zero gradients for every trainable array of every non-frozen layer.
template <typename T>
Gradients<T> zero_gradients(const NetworkModel<T>& m, const std::set<std::string>& frozen = {}) {
  Gradients<T> g;
  for (const auto& l : m.layers) {
    if (frozen.count(l.name)) continue;
    for (const auto& s : trainable_specs(l)) g.emplace(s.name, Tensor<T>(s.dims));
  }
  return g;
}

namespace detail {

template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw,
                     Tensor<T>* gb) {
  const int in_ch = in.channels(), h = in.height(), wd = in.width();
  const int out_ch = w.dim(0), k = w.dim(2), pad = k / 2;
  for (int n = 0; n < in.batch(); ++n) {
    for (int o = 0; o < out_ch; ++o) {
      const T* g = gy.channel_ptr(n, o);
      if (gb) {
        T s{};
        for (std::size_t i = 0; i < gy.plane(); ++i) s += g[i];
        (*gb)[o] += s;
      }
      for (int c = 0; c < in_ch; ++c) {
        const T* src = in.channel_ptr(n, c);
        T* dsrc = gx ? gx->channel_ptr(n, c) : nullptr;
        const std::size_t wbase = (static_cast<std::size_t>(o) * in_ch + c) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
            const T wv = w[wbase + ky * k + kx];
            T acc{};
            for (int y = y0; y < y1; ++y) {
              const T* gr = g + static_cast<std::size_t>(y) * wd;
              const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(y + dy) * wd + dx;
              const T* s = src + off;
              if (gw) {
                for (int x = x0; x < x1; ++x) acc += gr[x] * s[x];
              }
              if (dsrc) {
                T* d = dsrc + off;
                for (int x = x0; x < x1; ++x) d[x] += wv * gr[x];
              }
            }
            if (gw) (*gw)[wbase + ky * k + kx] += acc;
          }
        }
      }
    }
  }
}

template <typename T>
void transposed_conv2x2_backward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                                 Tensor<T>* gw, Tensor<T>* gb) {
  const int in_ch = in.channels(), h = in.height(), wd = in.width();
  const int out_ch = w.dim(1), ow = 2 * wd;
  for (int n = 0; n < in.batch(); ++n) {
    for (int o = 0; o < out_ch; ++o) {
      const T* g = gy.channel_ptr(n, o);
      if (gb) {
        T s{};
        for (std::size_t i = 0; i < gy.plane(); ++i) s += g[i];
        (*gb)[o] += s;
      }
      for (int c = 0; c < in_ch; ++c) {
        const T* src = in.channel_ptr(n, c);
        T* dsrc = gx ? gx->channel_ptr(n, c) : nullptr;
        const std::size_t wbase = (static_cast<std::size_t>(c) * out_ch + o) * 4;
        for (int a = 0; a < 2; ++a) {
          for (int bb = 0; bb < 2; ++bb) {
            const T wv = w[wbase + a * 2 + bb];
            T acc{};
            for (int y = 0; y < h; ++y) {
              const T* gr = g + static_cast<std::size_t>(2 * y + a) * ow + bb;
              const T* s = src + static_cast<std::size_t>(y) * wd;
              if (gw) {
                for (int x = 0; x < wd; ++x) acc += gr[2 * x] * s[x];
              }
              if (dsrc) {
                T* d = dsrc + static_cast<std::size_t>(y) * wd;
                for (int x = 0; x < wd; ++x) d[x] += wv * gr[2 * x];
              }
            }
            if (gw) (*gw)[wbase + a * 2 + bb] += acc;
          }
        }
      }
    }
  }
}

// Batchnorm backward. With `stats` (training mode) the normalization
// statistics depend on the input and are differentiated through.
template <typename T>
void batchnorm_backward(const LayerSpec& l, const Tensor<T>& in, const Tensor<T>& gy, const WeightMap<T>& w,
                        const BatchStats<T>* stats, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
  const auto& gamma = w.at(l.name + ".gamma");
  const auto& rm = w.at(l.name + ".running_mean");
  const auto& rv = w.at(l.name + ".running_var");
  const T count = static_cast<T>(in.batch() * in.plane());
  for (int c = 0; c < in.channels(); ++c) {
    const T mean = stats ? stats->mean[c] : rm[c];
    const T inv_std = T{1} / std::sqrt((stats ? stats->var[c] : rv[c]) + static_cast<T>(kBatchNormEps));
    T sum_g{}, sum_gx{};
    for (int n = 0; n < in.batch(); ++n) {
      const T* x = in.channel_ptr(n, c);
      const T* g = gy.channel_ptr(n, c);
      for (std::size_t i = 0; i < in.plane(); ++i) {
        sum_g += g[i];
        sum_gx += g[i] * (x[i] - mean) * inv_std;
      }
    }
    if (ggamma) (*ggamma)[c] += sum_gx;
    if (gbeta) (*gbeta)[c] += sum_g;
    if (!gx) continue;
    const T scale = gamma[c] * inv_std;
    for (int n = 0; n < in.batch(); ++n) {
      const T* x = in.channel_ptr(n, c);
      const T* g = gy.channel_ptr(n, c);
      T* d = gx->channel_ptr(n, c);
      if (stats) {
        for (std::size_t i = 0; i < in.plane(); ++i) {
          const T xhat = (x[i] - mean) * inv_std;
          d[i] += scale / count * (count * g[i] - sum_g - xhat * sum_gx);
        }
      } else {
        for (std::size_t i = 0; i < in.plane(); ++i) d[i] += scale * g[i];
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(const Tensor<T>& in, const Tensor<T>& gy, Tensor<T>& gx) {
  const int h = gy.height(), w = gy.width(), iw = in.width();
  for (int n = 0; n < in.batch(); ++n) {
    for (int c = 0; c < in.channels(); ++c) {
      const T* src = in.channel_ptr(n, c);
      const T* g = gy.channel_ptr(n, c);
      T* d = gx.channel_ptr(n, c);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int a = kernels::window_argmax(src, iw, y, x);
          d[(2 * y + a / 2) * iw + 2 * x + a % 2] += g[y * w + x];
        }
      }
    }
  }
}

template <typename T>
void softmax_channel_backward(const Tensor<T>& out, const Tensor<T>& gy, Tensor<T>& gx) {
  for (int n = 0; n < out.batch(); ++n) {
    for (std::size_t i = 0; i < out.plane(); ++i) {
      T dot{};
      for (int c = 0; c < out.channels(); ++c) dot += out.channel_ptr(n, c)[i] * gy.channel_ptr(n, c)[i];
      for (int c = 0; c < out.channels(); ++c) {
        gx.channel_ptr(n, c)[i] += out.channel_ptr(n, c)[i] * (gy.channel_ptr(n, c)[i] - dot);
      }
    }
  }
}

template <typename T>
Tensor<T>* grad_slot(Gradients<T>* grads, const std::string& name) {
  if (!grads) return nullptr;
  auto it = grads->find(name);
  return it == grads->end() ? nullptr : &it->second;
}

template <typename T>
void accumulate_into(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// Backward through one layer. Returns dL/dinput; dL/dskip (concat only) is
// written to `grad_skip`. Weight gradients are accumulated into the arrays of
// `grads` that exist (absent names are not computed).
template <typename T>
Tensor<T> layer_backward(const LayerSpec& l, const Tensor<T>& input, const Tensor<T>& output,
                         const Tensor<T>& grad_out, const WeightMap<T>& w, Gradients<T>* grads,
                         const BatchStats<T>* stats = nullptr, Tensor<T>* grad_skip = nullptr,
                         const Tensor<T>* skip = nullptr) {
  Tensor<T> gx(input.dims());
  switch (l.kind) {
    case LayerKind::conv3x3:
    case LayerKind::conv1x1:
      detail::conv2d_backward(input, w.at(l.name + ".w"), grad_out, &gx, detail::grad_slot(grads, l.name + ".w"),
                              detail::grad_slot(grads, l.name + ".b"));
      break;
    case LayerKind::transposed_conv2x2:
      detail::transposed_conv2x2_backward(input, w.at(l.name + ".w"), grad_out, &gx,
                                          detail::grad_slot(grads, l.name + ".w"),
                                          detail::grad_slot(grads, l.name + ".b"));
      break;
    case LayerKind::batchnorm:
      detail::batchnorm_backward(l, input, grad_out, w, stats, &gx, detail::grad_slot(grads, l.name + ".gamma"),
                                 detail::grad_slot(grads, l.name + ".beta"));
      break;
    case LayerKind::relu:
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = input[i] > T{0} ? grad_out[i] : T{0};
      break;
    case LayerKind::maxpool2x2: detail::maxpool2x2_backward(input, grad_out, gx); break;
    case LayerKind::concat_skip: {
      const int first = input.channels();
      for (int n = 0; n < input.batch(); ++n) {
        std::copy_n(grad_out.channel_ptr(n, 0), input.plane() * first, gx.channel_ptr(n, 0));
      }
      if (grad_skip && skip) {
        *grad_skip = Tensor<T>(skip->dims());
        for (int n = 0; n < input.batch(); ++n) {
          std::copy_n(grad_out.channel_ptr(n, first), input.plane() * skip->channels(), grad_skip->channel_ptr(n, 0));
        }
      }
      break;
    }
    case LayerKind::softmax_channel: detail::softmax_channel_backward(output, grad_out, gx); break;
  }
  return gx;
}

// Propagates the output gradients in `grad` (indexed like the layers, empty =
// zero) back through the graph recorded in `tr`. Only layers with `active[i]`
// are processed when `active` is given; gradients reaching inactive layers
// stay in `grad` for the caller. Weight gradients go into `grads`.
template <typename T>
void backward_graph(const NetworkModel<T>& m, const ActivationTrace<T>& tr, std::vector<Tensor<T>>& grad,
                    Gradients<T>& grads, const std::vector<bool>* active = nullptr,
                    Tensor<T>* grad_image = nullptr) {
  for (std::size_t i = m.layers.size(); i-- > 0;) {
    if (grad[i].empty() || (active && !(*active)[i])) continue;
    const auto& l = m.layers[i];
    const Tensor<T>& in = layer_input(m, tr, i);
    const bool training_bn = l.kind == LayerKind::batchnorm && tr.mode == BnMode::training;
    Tensor<T> gskip;
    const Tensor<T>* skip = l.kind == LayerKind::concat_skip ? &layer_skip(m, tr, i) : nullptr;
    Tensor<T> gx = layer_backward(l, in, tr.output(i), grad[i], m.weights, &grads,
                                  training_bn ? &tr.bn_stats[i] : nullptr, &gskip, skip);
    if (skip) detail::accumulate_into(grad[m.index_of(*l.skip_source)], gskip);
    if (l.input.empty()) {
      if (grad_image) detail::accumulate_into(*grad_image, gx);
    } else {
      detail::accumulate_into(grad[m.index_of(l.input)], gx);
    }
    grad[i] = Tensor<T>();
  }
}

struct BackwardOptions {
  std::set<std::string> frozen_layers;  // layers whose weights get no gradient
  BnMode mode = BnMode::training;
};

template <typename T>
struct LossGradients {
  LossBreakdown<T> losses;
  Gradients<T> grads;
  ActivationTrace<T> trace;  // primary forward pass (batch statistics in training mode)
};

// Losses and exact gradients of loss_seg + loss_cc. When `fixed_frw_weights`
// is given it replaces the LRP-derived FRW weights (used to check gradients
// with the weights held constant).
template <typename T>
LossGradients<T> loss_and_gradients(const NetworkModel<T>& m, const Tensor<T>& image, const LabelSet& labels,
                                    const LossWeights& weights, const FrwConfig& frw,
                                    const BackwardOptions& opts = {},
                                    const Tensor<T>* fixed_frw_weights = nullptr) {
  auto fwd = forward(m, image, opts.mode);
  LossGradients<T> r;
  r.grads = zero_gradients(m, opts.frozen_layers);
  const T ce_v = masked_cross_entropy(fwd.y_seg, labels.voronoi);
  const T ce_c = masked_cross_entropy(fwd.y_seg, labels.cluster);
  const T ce_p = masked_cross_entropy(fwd.y_cc, labels.point);

  std::vector<Tensor<T>> g1(m.layers.size());
  masked_cross_entropy_grad(fwd.y_seg, labels.voronoi, static_cast<T>(weights.alpha_v), g1[m.seg_output()]);
  masked_cross_entropy_grad(fwd.y_seg, labels.cluster, static_cast<T>(weights.alpha_c), g1[m.seg_output()]);
  masked_cross_entropy_grad(fwd.y_cc, labels.point, static_cast<T>(weights.alpha_p), g1[m.cc_output()]);

  T frw_value{};
  if (frw.enabled) {
    const auto layer = feature_layer(m, frw.layer);
    if (m.layers[layer].section != Section::trunk) {
      throw ConfigError("FRW layer '" + frw.layer + "' is not a trunk layer");
    }
    Tensor<T> w = fixed_frw_weights ? *fixed_frw_weights
                                    : frw_weights(frw_relevance(m, fwd, layer, labels.point, frw.target_confidence));
    auto pass = frw_pass_with_weights(m, fwd.trace, layer, std::move(w), labels.point);
    frw_value = pass.loss;
    std::vector<Tensor<T>> g2(m.layers.size());
    masked_cross_entropy_grad(pass.result.y_cc, labels.point, static_cast<T>(weights.alpha_frw), g2[m.cc_output()]);
    auto active = downstream_of(m, layer);
    active[layer] = false;
    backward_graph(m, pass.result.trace, g2, r.grads, &active);
    for (std::size_t i = 0; i < g2.size(); ++i) {
      if (g2[i].empty()) continue;
      if (i == layer) {
        for (std::size_t k = 0; k < g2[i].size(); ++k) g2[i][k] *= pass.weights[k];
      }
      detail::accumulate_into(g1[i], g2[i]);
    }
  }
  backward_graph(m, fwd.trace, g1, r.grads);
  r.losses = combine_losses(ce_v, ce_c, ce_p, frw_value, weights);
  r.trace = std::move(fwd.trace);
  return r;
}

}  // namespace splitexpand
