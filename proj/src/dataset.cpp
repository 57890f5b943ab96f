#include "cliprpn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cliprpn/errors.hpp"
#include "cliprpn/hash.hpp"

namespace cliprpn {

void RainMask::validate() const {
  if (!values.defined() || values.dim() != 2) throw ShapeError("RainMask expects an [H, W] tensor");
  if (kind == MaskKind::binary_gt) {
    if (!((values == 0) | (values == 1)).all().item<bool>()) {
      throw std::invalid_argument("binary mask holds values outside {0, 1}");
    }
  } else if (!((values > 0) & (values < 1)).all().item<bool>()) {
    throw std::invalid_argument("predicted mask must lie strictly inside (0, 1)");
  }
}

torch::Tensor gt_mask_tensor(const torch::Tensor& rainy, const torch::Tensor& clean, double threshold) {
  if (rainy.sizes() != clean.sizes()) throw ShapeError("gt_mask: rainy/clean shape mismatch");
  if (rainy.dim() != 4 || rainy.size(1) != 3) throw ShapeError("gt_mask_tensor expects [B, 3, H, W]");
  auto r = rainy.detach().to(torch::kFloat32).contiguous();
  auto c = clean.detach().to(torch::kFloat32).contiguous();
  const auto b = r.size(0), h = r.size(2), w = r.size(3);
  auto out = torch::zeros({b, 1, h, w}, torch::kFloat32);
  auto ra = r.accessor<float, 4>();
  auto ca = c.accessor<float, 4>();
  auto oa = out.accessor<float, 4>();
  // Threshold is the float32 value; the channel mean is exact in double, so 0.1f itself is excluded.
  const auto thr = static_cast<double>(static_cast<float>(threshold));
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double sum = std::fabs(ra[n][0][y][x] - ca[n][0][y][x]);
        sum += std::fabs(ra[n][1][y][x] - ca[n][1][y][x]);
        sum += std::fabs(ra[n][2][y][x] - ca[n][2][y][x]);
        oa[n][0][y][x] = (sum / 3.0) > thr ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

RainMask gt_mask(const ImagePair& pair, double threshold) {
  auto m = gt_mask_tensor(pair.rainy.tensor().unsqueeze(0), pair.clean.tensor().unsqueeze(0), threshold);
  return {m[0][0], MaskKind::binary_gt, 0};
}

torch::Tensor downsample_mask_tensor(const torch::Tensor& mask, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  const auto nd = mask.dim();
  if (nd < 2) throw ShapeError("mask must have spatial dims");
  if (mask.size(nd - 2) % factor != 0 || mask.size(nd - 1) % factor != 0) {
    std::ostringstream os;
    os << "mask " << mask.size(nd - 2) << "x" << mask.size(nd - 1) << " not divisible by " << factor;
    throw ShapeError(os.str());
  }
  if (factor == 1) return mask;
  auto t = mask;
  while (t.dim() < 4) t = t.unsqueeze(0);
  auto pooled = torch::max_pool2d(t, {factor, factor}, {factor, factor});
  auto shape = mask.sizes().vec();
  shape[nd - 2] /= factor;
  shape[nd - 1] /= factor;
  return pooled.reshape(shape);
}

RainMask downsample_mask(const RainMask& mask, int factor) {
  int level = mask.level;
  for (int f = factor; f > 1; f /= 2) ++level;
  return {downsample_mask_tensor(mask.values, factor), mask.kind, level};
}

// --- synthetic data ---------------------------------------------------------

ImagePair synth_rain(const Image& clean, const SynthRainParams& params) {
  if (!(params.intensity > 0.0 && params.intensity <= 1.0)) {
    throw std::invalid_argument("synth_rain intensity must lie in (0, 1]");
  }
  if (params.length < 1 || params.streak_count < 0) throw std::invalid_argument("synth_rain: bad streak geometry");
  const auto h = clean.height();
  const auto w = clean.width();
  auto layer = torch::zeros({h, w}, torch::kFloat32);
  auto la = layer.accessor<float, 2>();

  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double dx = std::sin(theta);
  const double dy = std::cos(theta);
  const double reach_x = std::abs(dx) * params.length;
  const double reach_y = std::abs(dy) * params.length;
  SplitMix64 rng(params.seed ^ 0x5261696e53747265ULL);
  auto uniform01 = [&rng] { return (rng.next_symmetric() + 1.0) * 0.5; };

  std::set<std::pair<std::int64_t, std::int64_t>> pixels;
  for (int s = 0; s < params.streak_count; ++s) {
    const double x0 = -reach_x + uniform01() * (static_cast<double>(w) + 2.0 * reach_x);
    const double y0 = -reach_y + uniform01() * (static_cast<double>(h) + reach_y);
    pixels.clear();
    for (int t = 0; t < params.length; ++t) {
      const auto px = static_cast<std::int64_t>(std::floor(x0 + t * dx + 0.5));
      const auto py = static_cast<std::int64_t>(std::floor(y0 + t * dy + 0.5));
      if (px >= 0 && px < w && py >= 0 && py < h) pixels.emplace(py, px);
    }
    for (const auto& [py, px] : pixels) la[py][px] += static_cast<float>(params.intensity);
  }
  auto rainy = (clean.tensor() + layer.unsqueeze(0)).clamp(0.0, 1.0);
  return {Image(rainy), clean, ""};
}

Image procedural_scene(std::int64_t height, std::int64_t width, std::uint64_t seed) {
  SplitMix64 rng(seed ^ 0x5363656e65ULL);
  auto u = [&rng] { return (rng.next_symmetric() + 1.0) * 0.5; };
  auto ys = torch::linspace(0.0, 1.0, height, torch::kFloat64).view({height, 1});
  auto xs = torch::linspace(0.0, 1.0, width, torch::kFloat64).view({1, width});

  auto img = torch::empty({3, height, width}, torch::kFloat64);
  const double gx = u() - 0.5, gy = u() - 0.5;
  for (int c = 0; c < 3; ++c) {
    const double base = 0.15 + 0.4 * u();
    img[c] = base + 0.3 * (gx * xs + gy * ys);
  }
  const int discs = 2 + static_cast<int>(u() * 3.0);
  for (int d = 0; d < discs; ++d) {
    const double cx = u(), cy = u(), r = 0.08 + 0.2 * u();
    auto inside = ((xs - cx).pow(2) + (ys - cy).pow(2)) < r * r;
    for (int c = 0; c < 3; ++c) img[c] = torch::where(inside, torch::full({}, 0.1 + 0.6 * u(), torch::kFloat64), img[c]);
  }
  const double bar = u();
  auto in_bar = (xs > bar) & (xs < bar + 0.1);
  for (int c = 0; c < 3; ++c) {
    img[c] = torch::where(in_bar.expand({height, width}), img[c] * 0.5, img[c]);
  }
  return Image(img.clamp(0.02, 0.8).to(torch::kFloat32));
}

std::vector<ImagePair> make_synthetic_pairs(std::size_t count, std::int64_t height, std::int64_t width,
                                            const SynthRainParams& rain, std::uint64_t seed) {
  std::vector<ImagePair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SynthRainParams p = rain;
    p.seed = rain.seed + 7919 * i + seed;
    auto pair = synth_rain(procedural_scene(height, width, seed * 1000003ULL + i), p);
    std::ostringstream id;
    id << std::setw(4) << std::setfill('0') << i;
    pair.id = id.str();
    out.push_back(std::move(pair));
  }
  return out;
}

// --- manifests ------------------------------------------------------------

std::string to_string(SourceTag tag) {
  switch (tag) {
    case SourceTag::rain100l: return "rain100l";
    case SourceTag::rain100h: return "rain100h";
    case SourceTag::rain800: return "rain800";
    case SourceTag::mixed: return "mixed";
    case SourceTag::synthetic: return "synthetic";
  }
  return "synthetic";
}

SourceTag source_tag_from_string(const std::string& s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto t : {SourceTag::rain100l, SourceTag::rain100h, SourceTag::rain800, SourceTag::mixed, SourceTag::synthetic}) {
    if (to_string(t) == lower) return t;
  }
  throw std::invalid_argument("unknown source tag: " + s);
}

DatasetManifest::DatasetManifest(std::string name, SourceTag tag, std::vector<ManifestEntry> entries,
                                 bool check_paths)
    : name_(std::move(name)), tag_(tag), entries_(std::move(entries)) {
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (!seen.insert(e.id).second) throw std::invalid_argument("duplicate manifest id: " + e.id);
    if (check_paths) {
      for (const auto& p : {e.rainy, e.clean}) {
        if (!std::filesystem::exists(p)) throw IoError("manifest path does not exist: " + p.string());
      }
    }
  }
}

namespace {

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::map<std::string, std::filesystem::path> scan_images(const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.emplace(e.path().stem().string(), e.path());
  }
  return out;
}

}  // namespace

DatasetManifest DatasetManifest::from_directory(const std::filesystem::path& root, std::string name, SourceTag tag) {
  auto rainy = scan_images(root / "rain");
  auto clean = scan_images(root / "norain");
  std::vector<ManifestEntry> entries;
  for (const auto& [id, path] : rainy) {
    auto it = clean.find(id);
    if (it == clean.end()) throw IoError("no clean counterpart for " + path.string());
    entries.push_back({id, path, it->second});
  }
  return DatasetManifest(std::move(name), tag, std::move(entries));
}

DatasetManifest DatasetManifest::load_jsonl(const std::filesystem::path& path, std::string name, SourceTag tag) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    e.rainy = j.at("rainy").get<std::string>();
    e.clean = j.at("clean").get<std::string>();
    if (e.rainy.is_relative()) e.rainy = base / e.rainy;
    if (e.clean.is_relative()) e.clean = base / e.clean;
    entries.push_back(std::move(e));
  }
  return DatasetManifest(std::move(name), tag, std::move(entries));
}

void DatasetManifest::write_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  for (const auto& e : entries_) {
    nlohmann::json j;
    j["id"] = e.id;
    j["rainy"] = e.rainy.string();
    j["clean"] = e.clean.string();
    out << j.dump() << '\n';
  }
}

DatasetManifest build_mixed(std::span<const DatasetManifest> manifests, std::string name) {
  if (manifests.empty()) throw std::invalid_argument("build_mixed needs at least one manifest");
  std::vector<ManifestEntry> entries;
  for (const auto& m : manifests) {
    std::vector<ManifestEntry> part = m.entries();
    std::sort(part.begin(), part.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (auto& e : part) {
      e.id = m.name() + "/" + e.id;
      entries.push_back(std::move(e));
    }
  }
  // Paths were validated when the inputs were constructed.
  return DatasetManifest(std::move(name), SourceTag::mixed, std::move(entries), false);
}

ImagePair load_pair(const ManifestEntry& entry) {
  ImagePair pair{load_image(entry.rainy), load_image(entry.clean), entry.id};
  if (pair.rainy.tensor().sizes() != pair.clean.tensor().sizes()) {
    throw ShapeError("rainy/clean size mismatch for " + entry.id);
  }
  return pair;
}

std::optional<std::filesystem::path> default_data_root() {
  if (const char* v = std::getenv("CLIP_RPN_DATA_ROOT"); v != nullptr && *v != '\0') return std::filesystem::path(v);
  return std::nullopt;
}

MemorySource::MemorySource(std::vector<ImagePair> pairs) : pairs_(std::move(pairs)) {
  std::set<std::string> seen;
  for (const auto& p : pairs_) {
    if (!seen.insert(p.id).second) throw std::invalid_argument("duplicate pair id: " + p.id);
    if (p.rainy.tensor().sizes() != p.clean.tensor().sizes()) throw ShapeError("misaligned pair " + p.id);
  }
}

}  // namespace cliprpn
