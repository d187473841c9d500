#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ofa/elastic.hpp"
#include "ofa/network.hpp"
#include "ofa/supernet.hpp"
#include "ofa/tensor.hpp"

namespace ofa::checkpoint {

/// Container layout, all integers little-endian:
///   8 bytes  magic "OFACKPT\0"
///   u32      container version (1)
///   u64      manifest length in bytes
///   manifest JSON: {"schema_version", "kind", "meta",
///                   "tensors": [{"key", "shape", "offset", "numel"}]}
///   tensor payload: float32 values, offsets counted in floats from here.
inline constexpr char kMagic[8] = {'O', 'F', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr uint32_t kVersion = 1;

struct Blob {
  std::string key;
  Shape shape;
  std::vector<float> data;
};

struct Container {
  std::string kind;  // "run" | "subnet"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Blob> tensors;

  const Blob& at(const std::string& key) const;
  bool contains(const std::string& key) const;
  void add(std::string key, const Tensor& t);
  void add(std::string key, Shape shape, std::vector<float> data);
};

std::vector<uint8_t> encode(const Container& c);
Container decode(const std::vector<uint8_t>& bytes, const std::string& origin = "<memory>");
void write(const std::filesystem::path& path, const Container& c);
Container read(const std::filesystem::path& path);

/// Stores every supernet tensor under `prefix` + name.
void put_supernet(Container& c, const std::string& prefix, const Supernet& net);
/// Overwrites the supernet's tensors from the container; shapes must match.
void get_supernet(const Container& c, const std::string& prefix, Supernet& net);

void put_network(Container& c, const std::string& prefix, NetworkWeights& net);
void get_network(const Container& c, const std::string& prefix, NetworkWeights& net);

void save_subnet(const std::filesystem::path& path, elastic::StandaloneNet& net);
elastic::StandaloneNet load_subnet(const std::filesystem::path& path);
/// Standalone network stored in `c` under `prefix`, with arch/config in meta.
elastic::StandaloneNet subnet_from(const Container& c, const std::string& prefix, const nlohmann::json& meta);

}  // namespace ofa::checkpoint
