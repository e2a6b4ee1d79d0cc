#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace splitexpand {

enum class LayerKind { conv3x3, conv1x1, transposed_conv2x2, batchnorm, relu, maxpool2x2, concat_skip, softmax_channel };

enum class Section { trunk, seg_head, cc_head };

enum class Head { seg, cc };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::conv1x1: return "conv1x1";
    case LayerKind::transposed_conv2x2: return "transposed_conv2x2";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2x2: return "maxpool2x2";
    case LayerKind::concat_skip: return "concat_skip";
    case LayerKind::softmax_channel: return "softmax_channel";
  }
  return "?";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
  for (auto k : {LayerKind::conv3x3, LayerKind::conv1x1, LayerKind::transposed_conv2x2, LayerKind::batchnorm,
                 LayerKind::relu, LayerKind::maxpool2x2, LayerKind::concat_skip, LayerKind::softmax_channel}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

inline std::string_view to_string(Section s) {
  switch (s) {
    case Section::trunk: return "trunk";
    case Section::seg_head: return "seg_head";
    case Section::cc_head: return "cc_head";
  }
  return "?";
}

inline std::optional<Section> parse_section(std::string_view s) {
  for (auto v : {Section::trunk, Section::seg_head, Section::cc_head}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

struct LayerSpec {
  LayerKind kind{};
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  std::string input;  // producing layer; empty means the network input image
  std::optional<std::string> skip_source;  // concat_skip only
  Section section = Section::trunk;

  bool is_linear() const {
    return kind == LayerKind::conv3x3 || kind == LayerKind::conv1x1 || kind == LayerKind::transposed_conv2x2;
  }
  bool has_weights() const { return is_linear() || kind == LayerKind::batchnorm; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct WeightSpec {
  std::string name;
  std::vector<int> dims;
};

inline std::vector<WeightSpec> weight_specs(const LayerSpec& l) {
  const int i = l.in_channels, o = l.out_channels;
  switch (l.kind) {
    case LayerKind::conv3x3: return {{l.name + ".w", {o, i, 3, 3}}, {l.name + ".b", {o}}};
    case LayerKind::conv1x1: return {{l.name + ".w", {o, i, 1, 1}}, {l.name + ".b", {o}}};
    case LayerKind::transposed_conv2x2: return {{l.name + ".w", {i, o, 2, 2}}, {l.name + ".b", {o}}};
    case LayerKind::batchnorm:
      return {{l.name + ".gamma", {o}}, {l.name + ".beta", {o}}, {l.name + ".running_mean", {o}},
              {l.name + ".running_var", {o}}};
    default: return {};
  }
}

template <typename T>
using WeightMap = std::map<std::string, Tensor<T>>;

// Fixed two-head U-Net family: encoder blocks enc1..encD, bottleneck, decoder
// blocks decD..dec1, a 1x1 segmentation head and a cell-center head made of two
// conv-BN-ReLU blocks and a 1x1 conv. Both heads read dec1's output.
template <typename T>
struct NetworkModel {
  int depth = 4;
  int base_width = 32;
  std::vector<LayerSpec> layers;
  WeightMap<T> weights;

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw ConfigError("no layer named '" + std::string(name) + "'");
  }

  const Tensor<T>& weight(const std::string& name) const {
    auto it = weights.find(name);
    if (it == weights.end()) throw ModelFormatError(ModelFormatError::Kind::missing_weight, "missing weight '" + name + "'");
    return it->second;
  }

  Tensor<T>& weight(const std::string& name) {
    auto it = weights.find(name);
    if (it == weights.end()) throw ModelFormatError(ModelFormatError::Kind::missing_weight, "missing weight '" + name + "'");
    return it->second;
  }

  // Weight names in topology order.
  std::vector<std::string> weight_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers) {
      for (const auto& s : weight_specs(l)) names.push_back(s.name);
    }
    return names;
  }

  std::size_t seg_logits() const { return index_of("seg.conv"); }
  std::size_t cc_logits() const { return index_of("cc.conv"); }
  std::size_t seg_output() const { return index_of("seg.softmax"); }
  std::size_t cc_output() const { return index_of("cc.softmax"); }

  template <typename U>
  NetworkModel<U> cast() const {
    NetworkModel<U> m;
    m.depth = depth;
    m.base_width = base_width;
    m.layers = layers;
    for (const auto& [k, v] : weights) m.weights.emplace(k, v.template cast<U>());
    return m;
  }
};

inline int level_width(int base_width, int level) { return base_width << level; }

inline std::vector<LayerSpec> make_unet_topology(int depth, int width) {
  if (depth < 1 || width < 1) throw ConfigError("U-Net depth and width must be positive");
  std::vector<LayerSpec> layers;
  std::string prev;
  auto conv_block = [&](const std::string& block, int in_ch, int out_ch, Section sec) {
    for (int i = 1; i <= 2; ++i) {
      const std::string s = std::to_string(i);
      const int ci = i == 1 ? in_ch : out_ch;
      layers.push_back({LayerKind::conv3x3, block + ".conv" + s, ci, out_ch, prev, std::nullopt, sec});
      layers.push_back({LayerKind::batchnorm, block + ".bn" + s, out_ch, out_ch, block + ".conv" + s, std::nullopt, sec});
      layers.push_back({LayerKind::relu, block + ".relu" + s, out_ch, out_ch, block + ".bn" + s, std::nullopt, sec});
      prev = block + ".relu" + s;
    }
  };

  int in_ch = 3;
  for (int lvl = 1; lvl <= depth; ++lvl) {
    const int c = level_width(width, lvl - 1);
    conv_block("enc" + std::to_string(lvl), in_ch, c, Section::trunk);
    const std::string pool = "pool" + std::to_string(lvl);
    layers.push_back({LayerKind::maxpool2x2, pool, c, c, prev, std::nullopt, Section::trunk});
    prev = pool;
    in_ch = c;
  }
  conv_block("bottleneck", in_ch, level_width(width, depth), Section::trunk);
  for (int lvl = depth; lvl >= 1; --lvl) {
    const int c = level_width(width, lvl - 1);
    const std::string up = "up" + std::to_string(lvl);
    const std::string dec = "dec" + std::to_string(lvl);
    layers.push_back({LayerKind::transposed_conv2x2, up, 2 * c, c, prev, std::nullopt, Section::trunk});
    layers.push_back({LayerKind::concat_skip, dec + ".concat", c, 2 * c, up, "enc" + std::to_string(lvl) + ".relu2",
                      Section::trunk});
    prev = dec + ".concat";
    conv_block(dec, 2 * c, c, Section::trunk);
  }
  const std::string trunk_out = prev;

  layers.push_back({LayerKind::conv1x1, "seg.conv", width, 2, trunk_out, std::nullopt, Section::seg_head});
  layers.push_back({LayerKind::softmax_channel, "seg.softmax", 2, 2, "seg.conv", std::nullopt, Section::seg_head});

  prev = trunk_out;
  conv_block("cc", width, width, Section::cc_head);
  layers.push_back({LayerKind::conv1x1, "cc.conv", width, 2, prev, std::nullopt, Section::cc_head});
  layers.push_back({LayerKind::softmax_channel, "cc.softmax", 2, 2, "cc.conv", std::nullopt, Section::cc_head});
  return layers;
}

// Model with zero conv weights/biases and identity batchnorm (gamma 1, var 1).
template <typename T>
NetworkModel<T> make_unet(int depth, int width) {
  NetworkModel<T> m;
  m.depth = depth;
  m.base_width = width;
  m.layers = make_unet_topology(depth, width);
  for (const auto& l : m.layers) {
    for (const auto& s : weight_specs(l)) {
      const bool ones = s.name.ends_with(".gamma") || s.name.ends_with(".running_var");
      m.weights.emplace(s.name, Tensor<T>(s.dims, ones ? T{1} : T{0}));
    }
  }
  return m;
}

inline std::size_t fan_in(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv3x3: return static_cast<std::size_t>(l.in_channels) * 9;
    case LayerKind::conv1x1: return static_cast<std::size_t>(l.in_channels);
    case LayerKind::transposed_conv2x2: return static_cast<std::size_t>(l.in_channels);
    default: return 1;
  }
}

// He-uniform conv weights, zero biases, identity batchnorm.
template <typename T>
void init_he_uniform(NetworkModel<T>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& l : m.layers) {
    if (!l.is_linear()) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(l)));
    for (auto& v : m.weight(l.name + ".w").values()) v = static_cast<T>(rng.uniform(-bound, bound));
    m.weight(l.name + ".b").fill(T{0});
  }
  for (const auto& l : m.layers) {
    if (l.kind != LayerKind::batchnorm) continue;
    m.weight(l.name + ".gamma").fill(T{1});
    m.weight(l.name + ".beta").fill(T{0});
    m.weight(l.name + ".running_mean").fill(T{0});
    m.weight(l.name + ".running_var").fill(T{1});
  }
}

struct RandomizeOptions {
  bool zero_bias = false;  // zero conv biases, BN beta and running mean
};

// Random weights including non-trivial batchnorm statistics; used for tests.
template <typename T>
void randomize_model(NetworkModel<T>& m, std::uint64_t seed, RandomizeOptions opts = {}) {
  init_he_uniform(m, seed);
  Rng rng(seed ^ 0xA5A5A5A5ull);
  for (const auto& l : m.layers) {
    if (l.is_linear() && !opts.zero_bias) {
      for (auto& v : m.weight(l.name + ".b").values()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    }
    if (l.kind == LayerKind::batchnorm) {
      for (auto& v : m.weight(l.name + ".gamma").values()) v = static_cast<T>(rng.uniform(0.5, 1.5));
      for (auto& v : m.weight(l.name + ".running_var").values()) v = static_cast<T>(rng.uniform(0.5, 1.5));
      if (!opts.zero_bias) {
        for (auto& v : m.weight(l.name + ".beta").values()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
        for (auto& v : m.weight(l.name + ".running_mean").values()) v = static_cast<T>(rng.uniform(-0.1, 0.1));
      }
    }
  }
}

// Checks that channel counts chain through the topology and every weight is
// present with the expected dims.
template <typename T>
void validate_model(const NetworkModel<T>& m) {
  using K = ModelFormatError::Kind;
  std::map<std::string, int> produced;
  for (const auto& l : m.layers) {
    if (produced.contains(l.name)) throw ModelFormatError(K::bad_topology, "duplicate layer '" + l.name + "'");
    const int in_ch = l.input.empty() ? 3 : (produced.contains(l.input) ? produced[l.input] : -1);
    if (in_ch < 0) throw ModelFormatError(K::bad_topology, "layer '" + l.name + "' reads unknown '" + l.input + "'");
    if (l.kind == LayerKind::concat_skip) {
      if (!l.skip_source || !produced.contains(*l.skip_source)) {
        throw ModelFormatError(K::bad_topology, "concat '" + l.name + "' has no valid skip source");
      }
      if (in_ch + produced[*l.skip_source] != l.out_channels || in_ch != l.in_channels) {
        throw ModelFormatError(K::bad_topology, "concat '" + l.name + "' channel mismatch");
      }
    } else if (in_ch != l.in_channels) {
      throw ModelFormatError(K::bad_topology, "layer '" + l.name + "' expects " + std::to_string(l.in_channels) +
                                                  " channels, input has " + std::to_string(in_ch));
    }
    produced[l.name] = l.out_channels;
    for (const auto& s : weight_specs(l)) {
      auto it = m.weights.find(s.name);
      if (it == m.weights.end()) throw ModelFormatError(K::missing_weight, "missing weight '" + s.name + "'");
      if (it->second.dims() != s.dims) {
        throw ModelFormatError(K::dim_mismatch, "weight '" + s.name + "' has dims " + dims_string(it->second.dims()) +
                                                    ", topology expects " + dims_string(s.dims));
      }
    }
  }
  for (const char* required : {"seg.conv", "seg.softmax", "cc.conv", "cc.softmax"}) {
    if (!produced.contains(required)) throw ModelFormatError(K::bad_topology, std::string("missing layer ") + required);
  }
}

// Resolves a block name ("enc1", "enc3", "bottleneck", "dec2", ...) to the
// layer producing that block's feature map. Layer names pass through.
template <typename T>
std::size_t feature_layer(const NetworkModel<T>& m, const std::string& name) {
  if (auto i = m.find(name)) return *i;
  if (auto i = m.find(name + ".relu2")) return *i;
  throw ConfigError("no layer or block named '" + name + "' in model");
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

enum class BnMode { inference, training };

// Per-channel statistics used to normalize one batchnorm layer (biased variance).
template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
struct ActivationTrace {
  BnMode mode = BnMode::inference;
  Tensor<T> image;
  std::vector<Tensor<T>> outputs;      // indexed like NetworkModel::layers
  std::vector<BatchStats<T>> bn_stats;  // filled for batchnorm layers only

  const Tensor<T>& output(std::size_t i) const { return outputs.at(i); }
};

template <typename T>
const Tensor<T>& layer_input(const NetworkModel<T>& m, const ActivationTrace<T>& tr, std::size_t i) {
  const auto& l = m.layers[i];
  return l.input.empty() ? tr.image : tr.outputs[m.index_of(l.input)];
}

template <typename T>
const Tensor<T>& layer_skip(const NetworkModel<T>& m, const ActivationTrace<T>& tr, std::size_t i) {
  return tr.outputs[m.index_of(m.layers[i].skip_source.value())];
}

template <typename T>
BatchStats<T> batch_statistics(const Tensor<T>& x) {
  const int ch = x.channels();
  BatchStats<T> st{std::vector<T>(ch), std::vector<T>(ch)};
  const T count = static_cast<T>(x.batch() * x.plane());
  for (int c = 0; c < ch; ++c) {
    T s{};
    for (int n = 0; n < x.batch(); ++n) {
      const T* p = x.channel_ptr(n, c);
      for (std::size_t i = 0; i < x.plane(); ++i) s += p[i];
    }
    const T mean = s / count;
    T v{};
    for (int n = 0; n < x.batch(); ++n) {
      const T* p = x.channel_ptr(n, c);
      for (std::size_t i = 0; i < x.plane(); ++i) v += (p[i] - mean) * (p[i] - mean);
    }
    st.mean[c] = mean;
    st.var[c] = v / count;
  }
  return st;
}

// Folds batchnorm (gamma, beta, mean, var, eps) into y = x * scale + shift.
template <typename T>
void batchnorm_fold(const Tensor<T>& gamma, const Tensor<T>& beta, const std::vector<T>& mean,
                    const std::vector<T>& var, std::vector<T>& scale, std::vector<T>& shift) {
  const std::size_t ch = gamma.size();
  scale.resize(ch);
  shift.resize(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    scale[c] = gamma[c] / std::sqrt(var[c] + static_cast<T>(kBatchNormEps));
    shift[c] = beta[c] - mean[c] * scale[c];
  }
}

template <typename T>
std::vector<T> running_values(const NetworkModel<T>& m, const std::string& name) {
  const auto& t = m.weight(name);
  return {t.data().begin(), t.data().end()};
}

namespace detail {

template <typename T>
void check_input(const LayerSpec& l, const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError(l.name, "expected NCHW input, got " + dims_string(x.dims()));
  if (x.channels() != l.in_channels) {
    throw ShapeError(l.name, "expected " + std::to_string(l.in_channels) + " input channels, got " +
                                 std::to_string(x.channels()));
  }
  if (l.kind == LayerKind::maxpool2x2 && (x.height() % 2 || x.width() % 2)) {
    throw ShapeError(l.name, "maxpool2x2 needs even height and width, got " + dims_string(x.dims()));
  }
}

template <typename T>
void check_weight(const LayerSpec& l, const WeightMap<T>& w) {
  for (const auto& s : weight_specs(l)) {
    auto it = w.find(s.name);
    if (it == w.end()) throw ShapeError(l.name, "missing weight '" + s.name + "'");
    if (it->second.dims() != s.dims) {
      throw ShapeError(l.name, "weight '" + s.name + "' has dims " + dims_string(it->second.dims()));
    }
  }
}

}  // namespace detail

// Applies one layer. Batchnorm uses `stats` when given (training mode),
// otherwise the stored running statistics.
template <typename T>
Tensor<T> apply_layer(const LayerSpec& l, const Tensor<T>& input, const WeightMap<T>& w,
                      const Tensor<T>* skip = nullptr, const BatchStats<T>* stats = nullptr) {
  detail::check_input(l, input);
  detail::check_weight(l, w);
  switch (l.kind) {
    case LayerKind::conv3x3:
    case LayerKind::conv1x1: return kernels::conv2d(input, w.at(l.name + ".w"), w.at(l.name + ".b"));
    case LayerKind::transposed_conv2x2:
      return kernels::transposed_conv2x2(input, w.at(l.name + ".w"), w.at(l.name + ".b"));
    case LayerKind::batchnorm: {
      std::vector<T> scale, shift;
      const auto& rm = w.at(l.name + ".running_mean");
      const auto& rv = w.at(l.name + ".running_var");
      const std::vector<T> mean = stats ? stats->mean : std::vector<T>(rm.data().begin(), rm.data().end());
      const std::vector<T> var = stats ? stats->var : std::vector<T>(rv.data().begin(), rv.data().end());
      batchnorm_fold(w.at(l.name + ".gamma"), w.at(l.name + ".beta"), mean, var, scale, shift);
      return kernels::channel_affine(input, scale, shift);
    }
    case LayerKind::relu: return kernels::relu(input);
    case LayerKind::maxpool2x2: return kernels::maxpool2x2(input);
    case LayerKind::concat_skip: {
      if (!skip) throw ShapeError(l.name, "concat needs a skip tensor");
      if (skip->rank() != 4 || skip->batch() != input.batch() || skip->height() != input.height() ||
          skip->width() != input.width() || input.channels() + skip->channels() != l.out_channels) {
        throw ShapeError(l.name, "skip " + dims_string(skip->dims()) + " incompatible with input " +
                                     dims_string(input.dims()));
      }
      return kernels::concat_channels(input, *skip);
    }
    case LayerKind::softmax_channel: return kernels::softmax_channel(input);
  }
  throw ShapeError(l.name, "unknown layer kind");
}

template <typename T>
struct ForwardResult {
  Tensor<T> y_seg;
  Tensor<T> y_cc;
  ActivationTrace<T> trace;
};

template <typename T>
void check_image(const NetworkModel<T>& m, const Tensor<T>& image) {
  if (image.rank() != 4 || image.batch() != 1 || image.channels() != 3) {
    throw InputSizeError("image must be 1x3xHxW, got " + dims_string(image.dims()));
  }
  const int mult = 1 << m.depth;
  if (image.height() % mult || image.width() % mult) {
    throw InputSizeError("image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                         " not divisible by 2^depth = " + std::to_string(mult));
  }
}

namespace detail {

template <typename T>
void run_layer(const NetworkModel<T>& m, ActivationTrace<T>& tr, std::size_t i) {
  const auto& l = m.layers[i];
  const Tensor<T>& in = layer_input(m, tr, i);
  const Tensor<T>* skip = l.kind == LayerKind::concat_skip ? &layer_skip(m, tr, i) : nullptr;
  const BatchStats<T>* stats = nullptr;
  if (l.kind == LayerKind::batchnorm && tr.mode == BnMode::training) {
    tr.bn_stats[i] = batch_statistics(in);
    stats = &tr.bn_stats[i];
  }
  tr.outputs[i] = apply_layer(l, in, m.weights, skip, stats);
}

}  // namespace detail

// Full forward pass recording every layer output. In training mode batchnorm
// normalizes with batch statistics, which are recorded in the trace.
template <typename T>
ForwardResult<T> forward(const NetworkModel<T>& m, const Tensor<T>& image, BnMode mode = BnMode::inference) {
  check_image(m, image);
  ForwardResult<T> r;
  r.trace.mode = mode;
  r.trace.image = image;
  r.trace.outputs.resize(m.layers.size());
  r.trace.bn_stats.resize(m.layers.size());
  for (std::size_t i = 0; i < m.layers.size(); ++i) detail::run_layer(m, r.trace, i);
  r.y_seg = r.trace.outputs[m.seg_output()];
  r.y_cc = r.trace.outputs[m.cc_output()];
  return r;
}

// Layers whose value depends on the output of layer `from` (including itself).
template <typename T>
std::vector<bool> downstream_of(const NetworkModel<T>& m, std::size_t from) {
  std::vector<bool> dirty(m.layers.size(), false);
  dirty[from] = true;
  for (std::size_t i = from + 1; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const bool in_dirty = !l.input.empty() && dirty[m.index_of(l.input)];
    const bool skip_dirty = l.skip_source && dirty[m.index_of(*l.skip_source)];
    dirty[i] = in_dirty || skip_dirty;
  }
  return dirty;
}

// Replaces the output of layer `from` and recomputes every layer downstream of
// it; upstream activations are reused from `base`.
template <typename T>
ForwardResult<T> forward_from(const NetworkModel<T>& m, const ActivationTrace<T>& base, std::size_t from,
                              Tensor<T> replacement) {
  if (!replacement.same_dims(base.outputs.at(from))) {
    throw ShapeError(m.layers[from].name, "replacement " + dims_string(replacement.dims()) + " does not match " +
                                              dims_string(base.outputs[from].dims()));
  }
  ForwardResult<T> r;
  r.trace = base;
  r.trace.outputs[from] = std::move(replacement);
  const auto dirty = downstream_of(m, from);
  for (std::size_t i = from + 1; i < m.layers.size(); ++i) {
    if (dirty[i]) detail::run_layer(m, r.trace, i);
  }
  r.y_seg = r.trace.outputs[m.seg_output()];
  r.y_cc = r.trace.outputs[m.cc_output()];
  return r;
}

}  // namespace splitexpand
