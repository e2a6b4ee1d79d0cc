// Regenerates the committed golden fixtures. Run once; the tests replay them.
//   make_golden forward OUT.setn   network outputs for the forward replay test
//   make_golden frw DIR            model, image and GT_P for the FRW oracle script
#include <filesystem>
#include <iostream>
#include <string>

#include "splitexpand/labels.hpp"
#include "splitexpand/model_io.hpp"
#include "splitexpand/network.hpp"
#include "test_support.hpp"

int main(int argc, char** argv) {
  namespace sx = splitexpand;
  const std::string mode = argc == 3 ? argv[1] : "";
  if (mode == "forward") {
    const auto m = sx::testing::tiny_model<float>(42);
    const auto r = sx::forward(m, sx::testing::random_image<float>(16, 16, 7));
    sx::setn::save(argv[2], sx::kernels::concat_channels(r.y_seg, r.y_cc));
    return 0;
  }
  if (mode == "frw") {
    const std::filesystem::path dir = argv[2];
    std::filesystem::create_directories(dir);
    sx::save_model(sx::testing::tiny_model<float>(77), dir / "model");
    sx::setn::save(dir / "image.setn", sx::testing::random_image<float>(16, 16, 78));
    sx::PointAnnotation pts{{{3, 4}, {10, 12}, {12, 2}}};
    const auto gt = sx::enlarged_point_labels(pts, 16, 16);
    sx::Tensor<float> t({16, 16});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = gt.codes[i];
    sx::setn::save(dir / "gt_p.setn", t);
    return 0;
  }
  std::cerr << "usage: make_golden forward OUT.setn | make_golden frw DIR\n";
  return 1;
}
