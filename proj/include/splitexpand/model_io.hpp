#pragma once

// Model directory layout:
//   topology.json  layer list, U-Net depth/width and the weight index
//                  (name -> byte offset into weights.bin, dims)
//   weights.bin    concatenated raw f32 little-endian arrays in index order

#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <string>

#include "network.hpp"
#include "tensor.hpp"

namespace splitexpand {

inline constexpr const char* kModelFormat = "splitexpand-unet";
inline constexpr int kModelVersion = 1;

inline nlohmann::json topology_json(const NetworkModel<float>& m) {
  nlohmann::json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  j["depth"] = m.depth;
  j["base_width"] = m.base_width;
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json e{{"name", l.name},
                     {"kind", std::string(to_string(l.kind))},
                     {"in_channels", l.in_channels},
                     {"out_channels", l.out_channels},
                     {"input", l.input},
                     {"section", std::string(to_string(l.section))}};
    if (l.skip_source) e["skip_source"] = *l.skip_source;
    layers.push_back(std::move(e));
  }
  auto& index = j["weights"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& name : m.weight_names()) {
    const auto& t = m.weight(name);
    index.push_back({{"name", name}, {"offset", offset}, {"dims", t.dims()}});
    offset += t.size() * sizeof(float);
  }
  return j;
}

inline void save_model(const NetworkModel<float>& m, const std::filesystem::path& dir) {
  using K = ModelFormatError::Kind;
  validate_model(m);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ModelFormatError(K::io, "cannot create '" + dir.string() + "': " + ec.message());
  {
    std::ofstream os(dir / "topology.json");
    if (!os) throw ModelFormatError(K::io, "cannot write topology.json in '" + dir.string() + "'");
    os << topology_json(m).dump(1) << '\n';
  }
  std::ofstream os(dir / "weights.bin", std::ios::binary);
  if (!os) throw ModelFormatError(K::io, "cannot write weights.bin in '" + dir.string() + "'");
  for (const auto& name : m.weight_names()) setn::write_raw_f32(os, m.weight(name).data());
  if (!os) throw ModelFormatError(K::io, "write failed for weights.bin");
}

namespace detail {

inline LayerSpec parse_layer(const nlohmann::json& e) {
  using K = ModelFormatError::Kind;
  LayerSpec l;
  l.name = e.at("name").get<std::string>();
  const auto kind = parse_layer_kind(e.at("kind").get<std::string>());
  if (!kind) throw ModelFormatError(K::bad_topology, "layer '" + l.name + "' has unknown kind");
  l.kind = *kind;
  l.in_channels = e.at("in_channels").get<int>();
  l.out_channels = e.at("out_channels").get<int>();
  l.input = e.value("input", std::string{});
  if (e.contains("skip_source")) l.skip_source = e.at("skip_source").get<std::string>();
  const auto sec = parse_section(e.value("section", std::string("trunk")));
  if (!sec) throw ModelFormatError(K::bad_topology, "layer '" + l.name + "' has unknown section");
  l.section = *sec;
  return l;
}

}  // namespace detail

inline NetworkModel<float> load_model(const std::filesystem::path& dir) {
  using K = ModelFormatError::Kind;
  std::ifstream ts(dir / "topology.json");
  if (!ts) throw ModelFormatError(K::io, "cannot open '" + (dir / "topology.json").string() + "'");
  nlohmann::json j;
  try {
    ts >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(K::bad_topology, std::string("topology.json: ") + e.what());
  }
  if (j.value("format", std::string{}) != kModelFormat) {
    throw ModelFormatError(K::bad_magic, "topology.json: not a " + std::string(kModelFormat) + " model");
  }
  if (j.value("version", -1) != kModelVersion) {
    throw ModelFormatError(K::bad_version, "topology.json: unsupported version " + j.value("version", nlohmann::json()).dump());
  }

  NetworkModel<float> m;
  std::map<std::string, std::pair<std::uint64_t, std::vector<int>>> index;
  try {
    m.depth = j.at("depth").get<int>();
    m.base_width = j.at("base_width").get<int>();
    for (const auto& e : j.at("layers")) m.layers.push_back(detail::parse_layer(e));
    for (const auto& e : j.at("weights")) {
      index[e.at("name").get<std::string>()] = {e.at("offset").get<std::uint64_t>(), e.at("dims").get<std::vector<int>>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(K::bad_topology, std::string("topology.json: ") + e.what());
  }

  std::ifstream ws(dir / "weights.bin", std::ios::binary);
  if (!ws) throw ModelFormatError(K::io, "cannot open '" + (dir / "weights.bin").string() + "'");
  const std::vector<char> blob((std::istreambuf_iterator<char>(ws)), std::istreambuf_iterator<char>());

  for (const auto& name : m.weight_names()) {
    auto it = index.find(name);
    if (it == index.end()) throw ModelFormatError(K::missing_weight, "missing weight '" + name + "'");
  }
  for (const auto& l : m.layers) {
    for (const auto& spec : weight_specs(l)) {
      const auto& [offset, dims] = index.at(spec.name);
      if (dims != spec.dims) {
        throw ModelFormatError(K::dim_mismatch, "weight '" + spec.name + "' has dims " + dims_string(dims) +
                                                    ", topology expects " + dims_string(spec.dims));
      }
      const std::size_t n = Tensor<float>::count(dims);
      if (offset + n * sizeof(float) > blob.size()) {
        throw ModelFormatError(K::truncated, "weights.bin truncated: array '" + spec.name + "' is missing");
      }
      std::vector<float> values(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto* b = reinterpret_cast<const unsigned char*>(blob.data() + offset + i * 4);
        const std::uint32_t u = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
                                (std::uint32_t{b[3]} << 24);
        values[i] = std::bit_cast<float>(u);
      }
      m.weights.emplace(spec.name, Tensor<float>(dims, std::move(values)));
    }
  }
  validate_model(m);
  return m;
}

}  // namespace splitexpand
