#include "cliprpn/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "cliprpn/errors.hpp"

namespace cliprpn {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

namespace {

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw std::invalid_argument("unsupported archive dtype");
  }
}

torch::ScalarType dtype_from_name(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  throw IoError("unsupported archive dtype: " + s);
}

}  // namespace

void write_tensor_archive(const std::filesystem::path& dir, nlohmann::json header, const NamedTensors& arrays) {
  std::filesystem::create_directories(dir);
  std::ofstream blob(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + (dir / "params.bin").string());
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : arrays) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    table.push_back({{"name", name},
                     {"dtype", dtype_name(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", offset},
                     {"nbytes", nbytes}});
    blob.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    offset += nbytes;
  }
  header["arrays"] = std::move(table);
  std::ofstream(dir / "header.json") << header.dump(2) << '\n';
  if (!blob) throw IoError("short write to " + (dir / "params.bin").string());
}

TensorArchive read_tensor_archive(const std::filesystem::path& dir) {
  std::ifstream hin(dir / "header.json");
  if (!hin) throw IoError("missing checkpoint header: " + (dir / "header.json").string());
  TensorArchive out;
  out.header = nlohmann::json::parse(hin);
  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw IoError("missing checkpoint blob: " + (dir / "params.bin").string());
  for (const auto& entry : out.header.at("arrays")) {
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, dtype_from_name(entry.at("dtype").get<std::string>()));
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
      throw IoError("array size mismatch for " + entry.at("name").get<std::string>());
    }
    blob.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    blob.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!blob) throw IoError("truncated checkpoint blob at " + entry.at("name").get<std::string>());
    out.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  out.header.erase("arrays");
  return out;
}

const torch::Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

}  // namespace cliprpn
