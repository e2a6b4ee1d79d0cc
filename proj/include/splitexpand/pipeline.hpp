#pragma once

// End-to-end orchestration: configuration, k-fold splits, weak-label
// generation, training with validation-based model selection, inference,
// postprocessing (base / split / split_expand) and evaluation.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "image_io.hpp"
#include "labels.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model_io.hpp"
#include "network.hpp"
#include "postprocess.hpp"
#include "rng.hpp"
#include "synthetic.hpp"
#include "train.hpp"

namespace splitexpand {

enum class PipelineMode { base, split, split_expand };

inline std::string_view to_string(PipelineMode m) {
  switch (m) {
    case PipelineMode::base: return "base";
    case PipelineMode::split: return "split";
    case PipelineMode::split_expand: return "split_expand";
  }
  return "?";
}

inline PipelineMode parse_mode(std::string_view s) {
  for (const auto m : {PipelineMode::base, PipelineMode::split, PipelineMode::split_expand})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected base, split or split_expand)");
}

// --- k-fold splits ---------------------------------------------------------

struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};

// Shuffles 0..n-1 by seed and cuts k near-equal chunks: test = chunk `fold`,
// val = chunk (fold+1) mod k, train = the rest (each list ascending).
inline FoldSplit kfold_split(std::size_t n, int k, int fold, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold split needs k >= 2");
  if (static_cast<std::size_t>(k) > n) {
    throw DataError("k-fold split with k = " + std::to_string(k) + " needs at least k images, got " + std::to_string(n));
  }
  if (fold < 0 || fold >= k) throw ConfigError("fold index " + std::to_string(fold) + " outside 0.." + std::to_string(k - 1));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  }
  auto chunk_of = [&](std::size_t pos) { return static_cast<int>(pos * k / n); };
  FoldSplit s;
  const int val_chunk = (fold + 1) % k;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const int c = chunk_of(pos);
    (c == fold ? s.test : c == val_chunk ? s.val : s.train).push_back(order[pos]);
  }
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

// --- configuration ---------------------------------------------------------

struct PipelineConfig {
  std::filesystem::path data_dir;
  std::filesystem::path model_dir;  // pretrained model; empty = train into out_dir/model
  std::filesystem::path out_dir = "out";
  PipelineMode mode = PipelineMode::split_expand;
  LossWeights weights = LossWeights::defaults(false);
  FrwConfig frw;
  PostprocessConfig post;
  std::uint64_t seed = 0;
  int epochs = 200;
  int patch_size = 0;
  int depth = 4;
  int width = 32;
  int folds = 10;
  int fold = 0;
  int validate_every = 10;
  bool augment = true;
  int threads = 1;

  void validate() const {
    post.validate();
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (patch_size < 0) throw ConfigError("patch_size must be non-negative");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (folds < 2 || fold < 0 || fold >= folds) throw ConfigError("fold must lie in 0..folds-1 with folds >= 2");
  }

  // Missing keys keep their defaults; unknown keys are rejected. When
  // `frw.enabled` is set and no loss weights are given, the FRW defaults apply.
  static PipelineConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"data_dir", "model_dir", "out_dir", "mode", "loss_weights", "frw", "postprocess",
                                             "seed", "epochs", "patch_size", "depth", "width", "folds", "fold",
                                             "validate_every", "augment", "threads"};
    if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("unknown configuration key '" + k + "'");
    PipelineConfig c;
    try {
      auto get = [&](const nlohmann::json& o, const char* key, auto& dst) {
        if (o.contains(key)) dst = o.at(key).get<std::remove_reference_t<decltype(dst)>>();
      };
      if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
      if (j.contains("model_dir")) c.model_dir = j["model_dir"].get<std::string>();
      if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
      if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
      if (j.contains("frw")) {
        const auto& f = j["frw"];
        get(f, "enabled", c.frw.enabled);
        get(f, "layer", c.frw.layer);
        get(f, "target_confidence", c.frw.target_confidence);
      }
      c.weights = LossWeights::defaults(c.frw.enabled);
      if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        get(w, "alpha_v", c.weights.alpha_v);
        get(w, "alpha_c", c.weights.alpha_c);
        get(w, "alpha_p", c.weights.alpha_p);
        get(w, "alpha_frw", c.weights.alpha_frw);
      }
      if (j.contains("postprocess")) {
        const auto& p = j["postprocess"];
        get(p, "cc_confidence", c.post.cc_confidence);
        get(p, "heatmap_threshold", c.post.heatmap_threshold);
        get(p, "overlap_threshold", c.post.overlap_threshold);
        get(p, "min_object_size", c.post.min_object_size);
        get(p, "seg_threshold", c.post.seg_threshold);
      }
      get(j, "seed", c.seed);
      get(j, "epochs", c.epochs);
      get(j, "patch_size", c.patch_size);
      get(j, "depth", c.depth);
      get(j, "width", c.width);
      get(j, "folds", c.folds);
      get(j, "fold", c.fold);
      get(j, "validate_every", c.validate_every);
      get(j, "augment", c.augment);
      get(j, "threads", c.threads);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad configuration value: ") + e.what());
    }
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    return {{"data_dir", data_dir.string()},
            {"model_dir", model_dir.string()},
            {"out_dir", out_dir.string()},
            {"mode", std::string(to_string(mode))},
            {"loss_weights",
             {{"alpha_v", weights.alpha_v}, {"alpha_c", weights.alpha_c}, {"alpha_p", weights.alpha_p}, {"alpha_frw", weights.alpha_frw}}},
            {"frw", {{"enabled", frw.enabled}, {"layer", frw.layer}, {"target_confidence", frw.target_confidence}}},
            {"postprocess",
             {{"cc_confidence", post.cc_confidence},
              {"heatmap_threshold", post.heatmap_threshold},
              {"overlap_threshold", post.overlap_threshold},
              {"min_object_size", post.min_object_size},
              {"seg_threshold", post.seg_threshold}}},
            {"seed", seed},
            {"epochs", epochs},
            {"patch_size", patch_size},
            {"depth", depth},
            {"width", width},
            {"folds", folds},
            {"fold", fold},
            {"validate_every", validate_every},
            {"augment", augment},
            {"threads", threads}};
  }
};

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open configuration '" + path.string() + "'");
  try {
    return PipelineConfig::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// --- parallel pool -----------------------------------------------------------

// Runs fn(i) for i in [0, n) on `threads` workers; rethrows the first error.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// --- weak labels -------------------------------------------------------------

inline LabelSet make_label_set(const Tensor<float>& image, const PointAnnotation& pts, std::uint64_t seed) {
  const int h = image.height(), w = image.width();
  pts.validate(h, w);
  return {voronoi_labels(pts, h, w), cluster_labels(image, pts, seed), enlarged_point_labels(pts, h, w)};
}

// --- postprocessing ------------------------------------------------------------

struct InstanceOutput {
  Mask seg_mask;           // binarized segmentation
  InstanceMap base;        // cleaned-up components
  InstanceMap split;       // after Instance-Splitting (== base in base mode)
  InstanceMap instances;   // final map for the chosen mode
  CondensedCc cc;
  std::vector<ExpansionRecord> expansions;
};

// From cell-probability planes. Expansion needs the model and the forward
// trace that produced `cc_prob`.
template <typename T>
InstanceOutput postprocess_maps(const Grid<T>& seg_prob, const Grid<T>& cc_prob, PipelineMode mode,
                                const PostprocessConfig& cfg, const NetworkModel<T>* model = nullptr,
                                const ActivationTrace<T>* trace = nullptr) {
  check_same_shape(seg_prob, cc_prob, "postprocess");
  InstanceOutput out;
  out.seg_mask = binarize(seg_prob, cfg.seg_threshold);
  out.base = morph_cleanup(out.seg_mask, cfg.min_object_size);
  out.split = out.base;
  out.instances = out.base;
  if (mode == PipelineMode::base) return out;
  out.cc = condense_cc(cc_prob, cfg);
  out.split = split_instances(out.base, out.cc.points);
  out.instances = out.split;
  if (mode == PipelineMode::split) return out;
  if (!model || !trace) throw ConfigError("split_expand mode needs the model for LRP explanations");
  auto ex = expand_cc(out.split, out.cc, *model, *trace, cfg);
  out.instances = std::move(ex.instances);
  out.expansions = std::move(ex.records);
  return out;
}

template <typename T>
InstanceOutput postprocess_forward(const NetworkModel<T>& m, const ForwardResult<T>& fwd, PipelineMode mode,
                                   const PostprocessConfig& cfg) {
  return postprocess_maps(cell_probability(fwd.y_seg), cell_probability(fwd.y_cc), mode, cfg, &m, &fwd.trace);
}

// Writes the instance map, a boundary overlay and the max-normalized heatmap
// of every added expansion (named <image>_r<row>_c<col>.png).
inline void write_instance_artifacts(const std::filesystem::path& out_dir, const std::string& name, const Tensor<float>& image,
                                     const InstanceOutput& o) {
  write_instance_png(out_dir / "instances" / (name + ".png"), o.instances);
  write_rgb_png(out_dir / "overlays" / (name + ".png"), boundary_overlay(image, o.instances));
  for (const auto& r : o.expansions) {
    if (r.outcome != ExpansionOutcome::added) continue;
    write_gray_png(out_dir / "heatmaps" / (name + "_r" + std::to_string(r.point.row) + "_c" + std::to_string(r.point.col) + ".png"),
                   r.heatmap);
  }
}

// Writes images/, points/ and masks/ in the dataset layout.
inline void write_dataset(const std::filesystem::path& root, const std::vector<SyntheticImage>& data) {
  for (const auto& s : data) {
    write_rgb_png(root / "images" / (s.name + ".png"), s.image);
    write_points_csv(root / "points" / (s.name + ".csv"), s.points);
    write_instance_png(root / "masks" / (s.name + ".png"), s.instances);
  }
}

// --- dataset and training ------------------------------------------------------

struct LoadedImage {
  std::string name;
  Tensor<float> image;
  PointAnnotation points;
  std::optional<InstanceMap> mask;
};

inline LoadedImage load_entry(const DatasetEntry& e) {
  LoadedImage li{e.name, read_rgb_png(e.image), read_points_csv(e.points), std::nullopt};
  li.points.validate(li.image.height(), li.image.width());
  if (e.mask) {
    li.mask = read_instance_png(*e.mask);
    if (li.mask->height != li.image.height() || li.mask->width != li.image.width()) {
      throw DataError("mask of '" + e.name + "' does not match its image size");
    }
  }
  return li;
}

// Mean pixel F1 of the binarized segmentation over images with masks.
inline double validation_pixel_f1(const NetworkModel<float>& m, const std::vector<const LoadedImage*>& val, double seg_threshold) {
  double sum = 0;
  int n = 0;
  for (const auto* v : val) {
    if (!v->mask) continue;
    const auto fwd = forward(m, v->image);
    sum += pixel_metrics(binarize(cell_probability(fwd.y_seg), seg_threshold), foreground(*v->mask)).f1;
    ++n;
  }
  return n ? sum / n : 0.0;
}

inline TrainConfig train_config(const PipelineConfig& c) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.augment.enabled = c.augment;
  t.augment.patch_size = c.patch_size;
  t.weights = c.weights;
  t.frw = c.frw;
  t.seed = c.seed;
  t.validate_every = c.validate_every;
  return t;
}

// Builds weak labels and trains a fresh model (He-uniform, seeded); the best
// validation pixel-F1 checkpoint is kept when validation masks exist.
inline NetworkModel<float> train_model(const PipelineConfig& c, const std::vector<const LoadedImage*>& train_set,
                                       const std::vector<const LoadedImage*>& val_set, TrainResult* result = nullptr,
                                       const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  if (train_set.empty()) throw DataError("training set is empty");
  auto m = make_unet<float>(c.depth, c.width);
  init_he_uniform(m, c.seed);
  std::vector<TrainSample> samples(train_set.size());
  parallel_for(train_set.size(), c.threads, [&](std::size_t i) {
    samples[i] = {train_set[i]->image, make_label_set(train_set[i]->image, train_set[i]->points, c.seed + i)};
  });
  const bool has_val = std::any_of(val_set.begin(), val_set.end(), [](const LoadedImage* v) { return v->mask.has_value(); });
  std::function<double(const NetworkModel<float>&)> validate;
  if (has_val) validate = [&](const NetworkModel<float>& mm) { return validation_pixel_f1(mm, val_set, c.post.seg_threshold); };
  auto r = train(m, samples, train_config(c), validate, on_epoch);
  if (result) *result = std::move(r);
  return m;
}

// --- full run --------------------------------------------------------------

struct PipelineResult {
  MetricsReport report;
  FoldSplit split;
  std::vector<std::string> processed;  // test image names
};

// Loads the dataset, trains (unless a model dir is given), postprocesses the
// test fold in the configured mode, writes artifacts and report.json.
inline PipelineResult run_pipeline(const PipelineConfig& c) {
  c.validate();
  const auto entries = list_dataset(c.data_dir);
  std::vector<LoadedImage> data(entries.size());
  parallel_for(entries.size(), c.threads, [&](std::size_t i) { data[i] = load_entry(entries[i]); });

  PipelineResult res;
  res.split = kfold_split(data.size(), c.folds, c.fold, c.seed);
  if (res.split.test.empty()) throw DataError("test set is empty");
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<const LoadedImage*> v;
    for (const auto i : idx) v.push_back(&data[i]);
    return v;
  };

  std::filesystem::create_directories(c.out_dir);
  NetworkModel<float> model;
  if (!c.model_dir.empty()) {
    model = load_model(c.model_dir);
  } else {
    TrainResult tr;
    model = train_model(c, pick(res.split.train), pick(res.split.val), &tr);
    save_model(model, c.out_dir / "model");
    std::ofstream log(c.out_dir / "loss_log.csv");
    write_loss_log(log, tr.log);
  }

  const auto test = pick(res.split.test);
  std::vector<std::optional<ImageMetrics>> metrics(test.size());
  parallel_for(test.size(), c.threads, [&](std::size_t i) {
    const auto& li = *test[i];
    const auto fwd = forward(model, li.image);
    const auto out = postprocess_forward(model, fwd, c.mode, c.post);
    write_instance_artifacts(c.out_dir, li.name, li.image, out);
    if (li.mask) metrics[i] = evaluate_instances(li.name, *li.mask, out.instances);
  });
  std::vector<ImageMetrics> evaluated;
  for (std::size_t i = 0; i < test.size(); ++i) {
    res.processed.push_back(test[i]->name);
    if (metrics[i]) evaluated.push_back(*metrics[i]);
  }
  res.report = MetricsReport::from(std::move(evaluated));  // test names are sorted, so the order is stable
  auto j = res.report.to_json();
  j["mode"] = std::string(to_string(c.mode));
  std::ofstream(c.out_dir / "report.json") << j.dump(2) << '\n';
  return res;
}

}  // namespace splitexpand
