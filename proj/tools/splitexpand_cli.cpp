// Command-line front end: synth, labels, train, infer, post, explain, eval,
// pipeline, splits. Exit codes: 0 success, 1 usage/configuration error,
// 2 data or model error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <string>

#include "splitexpand/image_io.hpp"
#include "splitexpand/lrp.hpp"
#include "splitexpand/metrics.hpp"
#include "splitexpand/model_io.hpp"
#include "splitexpand/pipeline.hpp"
#include "splitexpand/synthetic.hpp"
#include "splitexpand/train.hpp"

namespace se = splitexpand;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

se::PipelineConfig load_base_config(const Globals& g) {
  se::PipelineConfig c = g.config.empty() ? se::PipelineConfig{} : se::load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  c.validate();
  return c;
}

std::vector<se::LoadedImage> load_all(const fs::path& data, int threads) {
  const auto entries = se::list_dataset(data);
  std::vector<se::LoadedImage> out(entries.size());
  se::parallel_for(entries.size(), threads, [&](std::size_t i) { out[i] = se::load_entry(entries[i]); });
  return out;
}

std::vector<const se::LoadedImage*> pointers(const std::vector<se::LoadedImage>& v) {
  std::vector<const se::LoadedImage*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

// --- subcommands -----------------------------------------------------------

struct SynthArgs {
  std::string out;
  se::SyntheticSpec spec;
};

int run_synth(const Globals& g, SynthArgs a) {
  if (g.seed) a.spec.seed = *g.seed;
  const auto data = se::generate_synthetic(a.spec);
  se::write_dataset(a.out, data);
  std::cout << "wrote " << data.size() << " images to " << a.out << '\n';
  return 0;
}

struct LabelsArgs {
  std::string data, out;
};

int run_labels(const Globals& g, const LabelsArgs& a) {
  const auto c = load_base_config(g);
  const auto data = load_all(a.data, c.threads);
  se::parallel_for(data.size(), c.threads, [&](std::size_t i) {
    const auto l = se::make_label_set(data[i].image, data[i].points, c.seed + i);
    se::write_label_png(fs::path(a.out) / "voronoi" / (data[i].name + ".png"), l.voronoi);
    se::write_label_png(fs::path(a.out) / "cluster" / (data[i].name + ".png"), l.cluster);
    se::write_label_png(fs::path(a.out) / "point" / (data[i].name + ".png"), l.point);
  });
  std::cout << "labelled " << data.size() << " images\n";
  return 0;
}

struct TrainArgs {
  std::string data, val, out;
  std::optional<int> epochs, depth, width, patch;
  bool frw = false;
  std::string frw_layer;
};

int run_train(const Globals& g, const TrainArgs& a) {
  auto c = load_base_config(g);
  if (a.epochs) c.epochs = *a.epochs;
  if (a.depth) c.depth = *a.depth;
  if (a.width) c.width = *a.width;
  if (a.patch) c.patch_size = *a.patch;
  if (a.frw && !c.frw.enabled) {
    c.frw.enabled = true;
    c.weights = se::LossWeights::defaults(true);
  }
  if (!a.frw_layer.empty()) c.frw.layer = a.frw_layer;
  c.validate();
  const auto train_data = load_all(a.data, c.threads);
  const auto val_data = a.val.empty() ? std::vector<se::LoadedImage>{} : load_all(a.val, c.threads);
  se::TrainResult r;
  const auto m = se::train_model(c, pointers(train_data), pointers(val_data), &r, [](const se::EpochLoss& e) {
    std::cout << "epoch " << e.epoch << " loss_seg " << e.loss_seg << " loss_cc " << e.loss_cc << " loss_frw " << e.loss_frw << '\n';
  });
  se::save_model(m, a.out);
  std::ofstream log(fs::path(a.out) / "loss_log.csv");
  se::write_loss_log(log, r.log);
  if (r.selected_epoch) std::cout << "selected epoch " << *r.selected_epoch << " (val pixel F1 " << r.selected_score << ")\n";
  return 0;
}

struct InferArgs {
  std::string model, data, out;
};

int run_infer(const Globals& g, const InferArgs& a) {
  const auto c = load_base_config(g);
  const auto m = se::load_model(a.model);
  const auto entries = se::list_dataset(a.data);
  fs::create_directories(a.out);
  se::parallel_for(entries.size(), c.threads, [&](std::size_t i) {
    const auto fwd = se::forward(m, se::read_rgb_png(entries[i].image));
    se::setn::save((fs::path(a.out) / (entries[i].name + "_seg.setn")).string(), fwd.y_seg);
    se::setn::save((fs::path(a.out) / (entries[i].name + "_cc.setn")).string(), fwd.y_cc);
  });
  std::cout << "inferred " << entries.size() << " images\n";
  return 0;
}

struct PostArgs {
  std::string model, data, pred, out, mode;
};

int run_post(const Globals& g, const PostArgs& a) {
  auto c = load_base_config(g);
  if (!a.mode.empty()) c.mode = se::parse_mode(a.mode);
  std::optional<se::NetworkModel<float>> m;
  if (c.mode == se::PipelineMode::split_expand) {
    if (a.model.empty()) throw se::ConfigError("post --mode split_expand needs --model for LRP explanations");
    m = se::load_model(a.model);
  }
  const auto entries = se::list_dataset(a.data);
  se::parallel_for(entries.size(), c.threads, [&](std::size_t i) {
    const auto& e = entries[i];
    const auto image = se::read_rgb_png(e.image);
    const auto seg = se::setn::load((fs::path(a.pred) / (e.name + "_seg.setn")).string());
    const auto cc = se::setn::load((fs::path(a.pred) / (e.name + "_cc.setn")).string());
    se::InstanceOutput o;
    if (m) {
      // Expansion needs the activations behind the CC map.
      const auto fwd = se::forward(*m, image);
      o = se::postprocess_maps(se::cell_probability(seg), se::cell_probability(cc), c.mode, c.post, &*m, &fwd.trace);
    } else {
      o = se::postprocess_maps(se::cell_probability(seg), se::cell_probability(cc), c.mode, c.post);
    }
    se::write_instance_artifacts(a.out, e.name, image, o);
  });
  std::cout << "postprocessed " << entries.size() << " images (" << se::to_string(c.mode) << ")\n";
  return 0;
}

struct ExplainArgs {
  std::string model, image, out, head = "cc";
  int row = -1, col = -1;
};

int run_explain(const Globals&, const ExplainArgs& a) {
  const auto m = se::load_model(a.model);
  const auto image = se::read_rgb_png(a.image);
  const auto fwd = se::forward(m, image);
  if (a.row < 0 || a.col < 0 || a.row >= image.height() || a.col >= image.width()) {
    throw se::ConfigError("--row/--col outside the image");
  }
  if (a.head != "cc" && a.head != "seg") throw se::ConfigError("--head must be cc or seg");
  se::OutputTarget t{a.head == "cc" ? se::Head::cc : se::Head::seg, {{a.row, a.col}}, 1};
  const auto heat = se::explain(m, fwd.trace, t);
  se::Grid<float> g(image.height(), image.width(), 0.0f);
  float hmax = 0;
  for (std::size_t i = 0; i < heat.size(); ++i) hmax = std::max(hmax, heat[i]);
  if (hmax > 0)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = heat[i] / hmax;
  se::write_gray_png(a.out, g);
  std::cout << "relevance total " << std::accumulate(heat.values().begin(), heat.values().end(), 0.0) << '\n';
  return 0;
}

struct EvalArgs {
  std::string pred, gt, out;
};

int run_eval(const Globals&, const EvalArgs& a) {
  std::vector<se::ImageMetrics> rows;
  std::map<std::string, fs::path> gts;
  if (!fs::is_directory(a.gt)) throw se::DataError("ground-truth directory '" + a.gt + "' does not exist");
  if (!fs::is_directory(a.pred)) throw se::DataError("prediction directory '" + a.pred + "' does not exist");
  for (const auto& e : fs::directory_iterator(a.gt))
    if (e.path().extension() == ".png") gts[e.path().stem().string()] = e.path();
  for (const auto& [name, path] : gts) {
    const auto pred_path = fs::path(a.pred) / (name + ".png");
    if (!fs::exists(pred_path)) throw se::DataError("no prediction for '" + name + "'");
    rows.push_back(se::evaluate_instances(name, se::read_instance_png(path), se::read_instance_png(pred_path)));
  }
  if (rows.empty()) throw se::DataError("no ground-truth instance maps in '" + a.gt + "'");
  const auto report = se::MetricsReport::from(std::move(rows));
  const auto j = report.to_json();
  const fs::path out = a.out.empty() ? fs::path(a.pred) / "report.json" : fs::path(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out) << j.dump(2) << '\n';
  std::cout << "acc " << report.mean.pixel_accuracy << " pixel_f1 " << report.mean.pixel_f1 << " dice_obj "
            << report.mean.object_dice << " aji " << report.mean.aji << " (" << report.images.size() << " images)\n";
  return 0;
}

struct PipelineArgs {
  std::string data, model, out, mode;
  std::optional<int> epochs, fold;
};

int run_pipeline_cmd(const Globals& g, const PipelineArgs& a) {
  auto c = load_base_config(g);
  if (!a.data.empty()) c.data_dir = a.data;
  if (!a.model.empty()) c.model_dir = a.model;
  if (!a.out.empty()) c.out_dir = a.out;
  if (!a.mode.empty()) c.mode = se::parse_mode(a.mode);
  if (a.epochs) c.epochs = *a.epochs;
  if (a.fold) c.fold = *a.fold;
  c.validate();
  if (c.data_dir.empty()) throw se::ConfigError("pipeline needs a dataset (--data or data_dir in the config)");
  const auto r = se::run_pipeline(c);
  const auto& m = r.report.mean;
  std::cout << se::to_string(c.mode) << ": " << r.processed.size() << " test images; acc " << m.pixel_accuracy << " pixel_f1 "
            << m.pixel_f1 << " dice_obj " << m.object_dice << " aji " << m.aji << '\n';
  return 0;
}

struct SplitsArgs {
  std::string data;
  int n = 0, k = 10;
  std::optional<int> fold;
};

int run_splits(const Globals& g, const SplitsArgs& a) {
  const auto c = load_base_config(g);
  std::vector<std::string> names;
  if (!a.data.empty()) {
    for (const auto& e : se::list_dataset(a.data)) names.push_back(e.name);
  } else {
    for (int i = 0; i < a.n; ++i) names.push_back(std::to_string(i));
  }
  if (names.empty()) throw se::ConfigError("splits needs --data or --n");
  nlohmann::json out = nlohmann::json::array();
  for (int f = 0; f < a.k; ++f) {
    if (a.fold && *a.fold != f) continue;
    const auto s = se::kfold_split(names.size(), a.k, f, c.seed);
    auto named = [&](const std::vector<std::size_t>& idx) {
      nlohmann::json v = nlohmann::json::array();
      for (const auto i : idx) v.push_back(names[i]);
      return v;
    };
    out.push_back({{"fold", f}, {"train", named(s.train)}, {"val", named(s.val)}, {"test", named(s.test)}});
  }
  std::cout << out.dump(1) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised nuclei instance segmentation with Instance-Splitting and CC-Expansion"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  s_synth->add_option("--out", synth.out, "Output dataset directory")->required();
  s_synth->add_option("--count", synth.spec.count, "Number of images");
  s_synth->add_option("--height", synth.spec.height, "Image height");
  s_synth->add_option("--width", synth.spec.width, "Image width");
  s_synth->add_option("--min-cells", synth.spec.min_cells, "Minimum cells per image");
  s_synth->add_option("--max-cells", synth.spec.max_cells, "Maximum cells per image");
  s_synth->add_option("--min-radius", synth.spec.min_radius, "Minimum cell radius");
  s_synth->add_option("--max-radius", synth.spec.max_radius, "Maximum cell radius");
  s_synth->add_option("--clump", synth.spec.clump_fraction, "Fraction of cells in touching pairs");
  s_synth->add_option("--small", synth.spec.small_fraction, "Fraction of small cells");
  s_synth->add_option("--noise", synth.spec.noise, "Pixel noise standard deviation");

  LabelsArgs labels;
  auto* s_labels = app.add_subcommand("labels", "Write Voronoi, cluster and enlarged-point labels");
  s_labels->add_option("--data", labels.data, "Dataset directory")->required();
  s_labels->add_option("--out", labels.out, "Output directory")->required();

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train a model from point annotations");
  s_train->add_option("--data", tr.data, "Training dataset directory")->required();
  s_train->add_option("--val", tr.val, "Validation dataset directory (with masks) for model selection");
  s_train->add_option("--out", tr.out, "Output model directory")->required();
  s_train->add_option("--epochs", tr.epochs, "Epochs");
  s_train->add_option("--depth", tr.depth, "U-Net depth");
  s_train->add_option("--width", tr.width, "U-Net base width");
  s_train->add_option("--patch", tr.patch, "Random crop size (0 = full image)");
  s_train->add_flag("--frw", tr.frw, "Enable feature re-weighting");
  s_train->add_option("--frw-layer", tr.frw_layer, "Feature re-weighting layer");

  InferArgs inf;
  auto* s_infer = app.add_subcommand("infer", "Write segmentation and cell-centre probability maps");
  s_infer->add_option("--model", inf.model, "Model directory")->required();
  s_infer->add_option("--data", inf.data, "Dataset directory")->required();
  s_infer->add_option("--out", inf.out, "Output directory")->required();

  PostArgs post;
  auto* s_post = app.add_subcommand("post", "Turn probability maps into instance maps");
  s_post->add_option("--data", post.data, "Dataset directory")->required();
  s_post->add_option("--pred", post.pred, "Directory of *_seg.setn / *_cc.setn")->required();
  s_post->add_option("--out", post.out, "Output directory")->required();
  s_post->add_option("--model", post.model, "Model directory (needed for split_expand)");
  s_post->add_option("--mode", post.mode, "base, split or split_expand");

  ExplainArgs ex;
  auto* s_explain = app.add_subcommand("explain", "LRP heatmap for one output pixel");
  s_explain->add_option("--model", ex.model, "Model directory")->required();
  s_explain->add_option("--image", ex.image, "Input PNG")->required();
  s_explain->add_option("--row", ex.row, "Target row")->required();
  s_explain->add_option("--col", ex.col, "Target column")->required();
  s_explain->add_option("--head", ex.head, "cc or seg");
  s_explain->add_option("--out", ex.out, "Output heatmap PNG")->required();

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Score predicted instance maps against ground truth");
  s_eval->add_option("--pred", ev.pred, "Predicted instance-map directory")->required();
  s_eval->add_option("--gt", ev.gt, "Ground-truth instance-map directory")->required();
  s_eval->add_option("--out", ev.out, "Report path (default PRED/report.json)");

  PipelineArgs pl;
  auto* s_pipeline = app.add_subcommand("pipeline", "Labels, training, inference, postprocessing and evaluation on one fold");
  s_pipeline->add_option("--data", pl.data, "Dataset directory");
  s_pipeline->add_option("--model", pl.model, "Pretrained model directory (skips training)");
  s_pipeline->add_option("--out", pl.out, "Output directory");
  s_pipeline->add_option("--mode", pl.mode, "base, split or split_expand");
  s_pipeline->add_option("--epochs", pl.epochs, "Epochs");
  s_pipeline->add_option("--fold", pl.fold, "Fold index");

  SplitsArgs sp;
  auto* s_splits = app.add_subcommand("splits", "Print k-fold train/val/test splits as JSON");
  s_splits->add_option("--data", sp.data, "Dataset directory");
  s_splits->add_option("--n", sp.n, "Dataset size (without --data)");
  s_splits->add_option("--k", sp.k, "Number of folds");
  s_splits->add_option("--fold", sp.fold, "Only this fold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*s_synth) return run_synth(g, synth);
    if (*s_labels) return run_labels(g, labels);
    if (*s_train) return run_train(g, tr);
    if (*s_infer) return run_infer(g, inf);
    if (*s_post) return run_post(g, post);
    if (*s_explain) return run_explain(g, ex);
    if (*s_eval) return run_eval(g, ev);
    if (*s_pipeline) return run_pipeline_cmd(g, pl);
    if (*s_splits) return run_splits(g, sp);
  } catch (const se::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const se::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
