#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cliprpn/imaging.hpp"

namespace cliprpn {

enum class MaskKind { binary_gt, predicted };

// Single-channel rain mask, float32 [H, W].
struct RainMask {
  torch::Tensor values;
  MaskKind kind = MaskKind::binary_gt;
  int level = 0;

  std::int64_t height() const { return values.size(0); }
  std::int64_t width() const { return values.size(1); }
  // Throws if binary_gt contains anything but {0, 1}, or predicted leaves (0, 1).
  void validate() const;
};

inline constexpr double kRainThreshold = 0.1;

// 1 where the channel-mean absolute difference strictly exceeds `threshold`.
RainMask gt_mask(const ImagePair& pair, double threshold = kRainThreshold);
// Same rule on batched tensors [B, 3, H, W] -> [B, 1, H, W].
torch::Tensor gt_mask_tensor(const torch::Tensor& rainy, const torch::Tensor& clean,
                             double threshold = kRainThreshold);

// Max-pool downsampling; factor 1 is the identity.
RainMask downsample_mask(const RainMask& mask, int factor);
torch::Tensor downsample_mask_tensor(const torch::Tensor& mask, int factor);

struct SynthRainParams {
  int streak_count = 60;
  double angle_deg = 10.0;  // 0 is vertical, positive leans right going down
  int length = 12;
  double intensity = 0.5;
  std::uint64_t seed = 0;
};

// Adds oriented streaks to `clean`; returns (rainy, clean).
ImagePair synth_rain(const Image& clean, const SynthRainParams& params);

// Deterministic smooth-ish scene (gradients, discs, bars) for desk-scale datasets.
Image procedural_scene(std::int64_t height, std::int64_t width, std::uint64_t seed);

enum class SourceTag { rain100l, rain100h, rain800, mixed, synthetic };

std::string to_string(SourceTag tag);
SourceTag source_tag_from_string(const std::string& s);

struct ManifestEntry {
  std::string id;
  std::filesystem::path rainy;
  std::filesystem::path clean;
  bool operator==(const ManifestEntry&) const = default;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  // Validates unique ids; `check_paths` additionally requires both files to exist.
  DatasetManifest(std::string name, SourceTag tag, std::vector<ManifestEntry> entries, bool check_paths = true);

  // Pairs `<root>/rain/<id>.png` with `<root>/norain/<id>.png` (also accepts .jpg/.jpeg).
  static DatasetManifest from_directory(const std::filesystem::path& root, std::string name, SourceTag tag);
  // One JSON object per line: {"id":..., "rainy":..., "clean":...}. Relative paths resolve against the file.
  static DatasetManifest load_jsonl(const std::filesystem::path& path, std::string name, SourceTag tag);
  void write_jsonl(const std::filesystem::path& path) const;

  const std::string& name() const { return name_; }
  SourceTag source_tag() const { return tag_; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::string name_;
  SourceTag tag_ = SourceTag::synthetic;
  std::vector<ManifestEntry> entries_;
};

// Concatenation with ids prefixed `<manifest name>/`, ordered by source then id.
DatasetManifest build_mixed(std::span<const DatasetManifest> manifests, std::string name = "mixed");

ImagePair load_pair(const ManifestEntry& entry);

// Value of CLIP_RPN_DATA_ROOT, if set.
std::optional<std::filesystem::path> default_data_root();

// Random-access paired data used by training and evaluation.
class PairSource {
 public:
  virtual ~PairSource() = default;
  virtual std::size_t size() const = 0;
  virtual std::string id(std::size_t i) const = 0;
  virtual ImagePair load(std::size_t i) const = 0;
};

class ManifestSource final : public PairSource {
 public:
  explicit ManifestSource(DatasetManifest manifest) : manifest_(std::move(manifest)) {}
  std::size_t size() const override { return manifest_.size(); }
  std::string id(std::size_t i) const override { return manifest_.entries().at(i).id; }
  ImagePair load(std::size_t i) const override { return load_pair(manifest_.entries().at(i)); }
  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
};

class MemorySource final : public PairSource {
 public:
  explicit MemorySource(std::vector<ImagePair> pairs);
  std::size_t size() const override { return pairs_.size(); }
  std::string id(std::size_t i) const override { return pairs_.at(i).id; }
  ImagePair load(std::size_t i) const override { return pairs_.at(i); }

 private:
  std::vector<ImagePair> pairs_;
};

// `count` procedural scenes with synthetic rain; ids "0000", "0001", ...
std::vector<ImagePair> make_synthetic_pairs(std::size_t count, std::int64_t height, std::int64_t width,
                                            const SynthRainParams& rain, std::uint64_t seed);

}  // namespace cliprpn
