#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cliprpn {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// On-disk layout:
//   <dir>/header.json  user metadata plus an "arrays" table of
//                      {name, dtype, shape, offset, nbytes}
//   <dir>/params.bin   raw little-endian array data at the listed byte offsets
// Supported dtypes: float32, float64, int64.
void write_tensor_archive(const std::filesystem::path& dir, nlohmann::json header, const NamedTensors& arrays);

struct TensorArchive {
  nlohmann::json header;  // without the "arrays" table
  NamedTensors arrays;

  const torch::Tensor* find(const std::string& name) const;
};

TensorArchive read_tensor_archive(const std::filesystem::path& dir);

}  // namespace cliprpn
