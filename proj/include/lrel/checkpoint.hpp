#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lrel/model.hpp"
#include "lrel/tensor.hpp"

namespace lrel {

// "LREL" tensor container: magic, u32 format version, a JSON header that
// declares kind/metadata and the tensor list, then the tensors' raw 64-bit
// little-endian values in header order, row-major.
inline constexpr char kContainerMagic[4] = {'L', 'R', 'E', 'L'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorRef {
  std::string name;
  std::vector<int> shape;
  const double* data;
};

struct LoadedTensor {
  std::vector<int> shape;
  Vec values;
};

struct LoadedContainer {
  nlohmann::json header;
  std::vector<std::string> order;
  std::map<std::string, LoadedTensor> tensors;
};

std::string encode_container(nlohmann::json header, const std::vector<TensorRef>& tensors);
LoadedContainer decode_container(const std::string& bytes);

void write_container(const std::string& path, nlohmann::json header,
                     const std::vector<TensorRef>& tensors);
LoadedContainer read_container(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Parameters& params);
Parameters load_checkpoint(const std::string& path);

}  // namespace lrel
