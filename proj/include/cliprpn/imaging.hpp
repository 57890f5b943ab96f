#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cliprpn {

// RGB image stored channel-first as a float32 [3, H, W] tensor with values in [0, 1].
class Image {
 public:
  Image() = default;

  // Takes a [3, H, W] tensor. Throws ShapeError on bad rank/extent and
  // std::invalid_argument on non-finite or out-of-range values.
  explicit Image(torch::Tensor chw);

  static Image zeros(std::int64_t height, std::int64_t width);
  static Image filled(std::int64_t height, std::int64_t width, float r, float g, float b);
  // Clamps to [0, 1] first; use for network outputs.
  static Image from_clamped(const torch::Tensor& chw);

  std::int64_t height() const { return data_.size(1); }
  std::int64_t width() const { return data_.size(2); }
  bool empty() const { return !data_.defined(); }

  const torch::Tensor& tensor() const { return data_; }
  float at(int c, std::int64_t y, std::int64_t x) const;

 private:
  torch::Tensor data_;
};

struct ImagePair {
  Image rainy;
  Image clean;
  std::string id;
};

// --- file I/O -------------------------------------------------------------

// Loads PNG or JPEG as 8-bit RGB.
Image load_image(const std::filesystem::path& path);
// Writes an 8-bit RGB PNG; values are clamped and rounded half-up.
void save_png(const Image& img, const std::filesystem::path& path);
// Quantizes to the 8-bit grid exactly as save_png would.
Image quantize_8bit(const Image& img);

// --- metrics --------------------------------------------------------------

// BT.601 digital luma on the 0..255 scale: 16 + 65.481 R + 128.553 G + 24.966 B.
// Returns a float64 [H, W] tensor.
torch::Tensor to_luma(const Image& img);

inline constexpr double kDefaultPsnrCap = 100.0;

double psnr(const Image& a, const Image& b, double cap = kDefaultPsnrCap);
double psnr_luma(const torch::Tensor& ya, const torch::Tensor& yb, double cap = kDefaultPsnrCap);

// Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows on the luma channel.
double ssim(const Image& a, const Image& b);
double ssim_luma(const torch::Tensor& ya, const torch::Tensor& yb);

struct MetricsRow {
  std::string image;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;

  double psnr_mean() const;
  double ssim_mean() const;
  std::size_t count() const { return rows.size(); }

  std::string to_csv() const;
  std::string summary_json() const;
  void write(const std::filesystem::path& csv_path, const std::filesystem::path& json_path) const;
};

// --- augmentation ---------------------------------------------------------

struct CropWindow {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t size = 0;
  bool operator==(const CropWindow&) const = default;
};

struct FlipDecision {
  bool horizontal = false;
  bool vertical = false;
  bool operator==(const FlipDecision&) const = default;
};

CropWindow draw_crop_window(std::int64_t height, std::int64_t width, std::int64_t size, std::mt19937_64& rng);
FlipDecision draw_flips(double p, std::mt19937_64& rng);

// Works on any tensor whose last two dims are (H, W).
torch::Tensor crop_hw(const torch::Tensor& t, const CropWindow& window);
torch::Tensor flip_hw(const torch::Tensor& t, const FlipDecision& flips);

ImagePair crop_pair(const ImagePair& pair, const CropWindow& window);
ImagePair flip_pair(const ImagePair& pair, const FlipDecision& flips);

ImagePair random_crop_pair(const ImagePair& pair, std::int64_t size, std::mt19937_64& rng);
ImagePair random_crop_pair(const ImagePair& pair, std::int64_t size, std::uint64_t seed);
ImagePair random_flip_pair(const ImagePair& pair, double p, std::mt19937_64& rng);
ImagePair random_flip_pair(const ImagePair& pair, double p, std::uint64_t seed);

}  // namespace cliprpn
