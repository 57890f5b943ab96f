#include "cliprpn/imaging.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cliprpn/errors.hpp"

namespace cliprpn {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ShapeError(os.str());
  }
}

torch::Tensor gaussian_window(int size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g).view({1, 1, size, size});
}

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = (0.01 * 255.0) * (0.01 * 255.0);
constexpr double kSsimC2 = (0.03 * 255.0) * (0.03 * 255.0);

}  // namespace

// --- Image ----------------------------------------------------------------

Image::Image(torch::Tensor chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) {
    std::ostringstream os;
    os << "Image expects a [3, H, W] tensor, got " << chw.sizes();
    throw ShapeError(os.str());
  }
  if (chw.size(1) < 1 || chw.size(2) < 1) throw ShapeError("Image must be at least 1x1");
  auto t = chw.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  if (!torch::isfinite(t).all().item<bool>()) throw std::invalid_argument("Image contains non-finite values");
  if (t.min().item<float>() < 0.0f || t.max().item<float>() > 1.0f) {
    throw std::invalid_argument("Image values must lie in [0, 1]");
  }
  data_ = std::move(t);
}

Image Image::zeros(std::int64_t height, std::int64_t width) {
  return Image(torch::zeros({3, height, width}, torch::kFloat32));
}

Image Image::filled(std::int64_t height, std::int64_t width, float r, float g, float b) {
  auto t = torch::empty({3, height, width}, torch::kFloat32);
  t[0].fill_(r);
  t[1].fill_(g);
  t[2].fill_(b);
  return Image(t);
}

Image Image::from_clamped(const torch::Tensor& chw) {
  return Image(torch::nan_to_num(chw.detach().to(torch::kFloat32), 0.0).clamp(0.0, 1.0));
}

float Image::at(int c, std::int64_t y, std::int64_t x) const {
  return data_.accessor<float, 3>()[c][y][x];
}

// --- I/O ------------------------------------------------------------------

Image load_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image: " + path.string());
  const int h = bgr.rows;
  const int w = bgr.cols;
  auto t = torch::empty({3, h, w}, torch::kFloat32);
  auto acc = t.accessor<float, 3>();
  for (int y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      acc[0][y][x] = static_cast<float>(row[x][2]) / 255.0f;
      acc[1][y][x] = static_cast<float>(row[x][1]) / 255.0f;
      acc[2][y][x] = static_cast<float>(row[x][0]) / 255.0f;
    }
  }
  return Image(t);
}

namespace {

std::uint8_t to_byte(float v) {
  const double scaled = std::floor(static_cast<double>(std::clamp(v, 0.0f, 1.0f)) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

}  // namespace

void save_png(const Image& img, const std::filesystem::path& path) {
  const auto h = static_cast<int>(img.height());
  const auto w = static_cast<int>(img.width());
  cv::Mat bgr(h, w, CV_8UC3);
  auto acc = img.tensor().accessor<float, 3>();
  for (int y = 0; y < h; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      row[x][0] = to_byte(acc[2][y][x]);
      row[x][1] = to_byte(acc[1][y][x]);
      row[x][2] = to_byte(acc[0][y][x]);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Fixed compression level keeps output byte-stable across runs.
  if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw IoError("cannot write image: " + path.string());
  }
}

Image quantize_8bit(const Image& img) {
  auto out = img.tensor().clone();
  auto* p = out.data_ptr<float>();
  for (std::int64_t i = 0; i < out.numel(); ++i) p[i] = static_cast<float>(to_byte(p[i])) / 255.0f;
  return Image(out);
}

// --- metrics --------------------------------------------------------------

torch::Tensor to_luma(const Image& img) {
  auto t = img.tensor().to(torch::kFloat64);
  return 16.0 + 65.481 * t[0] + 128.553 * t[1] + 24.966 * t[2];
}

double psnr_luma(const torch::Tensor& ya, const torch::Tensor& yb, double cap) {
  require_same_shape(ya, yb, "psnr");
  const double mse = (ya.to(torch::kFloat64) - yb.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double psnr(const Image& a, const Image& b, double cap) {
  require_same_shape(a.tensor(), b.tensor(), "psnr");
  return psnr_luma(to_luma(a), to_luma(b), cap);
}

double ssim_luma(const torch::Tensor& ya, const torch::Tensor& yb) {
  require_same_shape(ya, yb, "ssim");
  if (ya.dim() != 2) throw ShapeError("ssim expects [H, W] luma planes");
  if (std::min(ya.size(0), ya.size(1)) < kSsimWindow) {
    throw ShapeError("ssim needs min(H, W) >= 11");
  }
  const auto window = gaussian_window(kSsimWindow, kSsimSigma);
  auto x = ya.to(torch::kFloat64).unsqueeze(0).unsqueeze(0);
  auto y = yb.to(torch::kFloat64).unsqueeze(0).unsqueeze(0);
  namespace F = torch::nn::functional;
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, window); };
  auto mu_x = filt(x);
  auto mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x * mu_x;
  auto syy = filt(y * y) - mu_y * mu_y;
  auto sxy = filt(x * y) - mu_x * mu_y;
  auto num = (2.0 * mu_x * mu_y + kSsimC1) * (2.0 * sxy + kSsimC2);
  auto den = (mu_x * mu_x + mu_y * mu_y + kSsimC1) * (sxx + syy + kSsimC2);
  return (num / den).mean().item<double>();
}

double ssim(const Image& a, const Image& b) {
  require_same_shape(a.tensor(), b.tensor(), "ssim");
  return ssim_luma(to_luma(a), to_luma(b));
}

double MetricsReport::psnr_mean() const {
  if (rows.empty()) return 0.0;
  return std::accumulate(rows.begin(), rows.end(), 0.0, [](double s, const MetricsRow& r) { return s + r.psnr; }) /
         static_cast<double>(rows.size());
}

double MetricsReport::ssim_mean() const {
  if (rows.empty()) return 0.0;
  return std::accumulate(rows.begin(), rows.end(), 0.0, [](double s, const MetricsRow& r) { return s + r.ssim; }) /
         static_cast<double>(rows.size());
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "image,psnr,ssim\n";
  for (const auto& r : rows) os << r.image << ',' << r.psnr << ',' << r.ssim << '\n';
  return os.str();
}

std::string MetricsReport::summary_json() const {
  nlohmann::json j;
  j["psnr_mean"] = psnr_mean();
  j["ssim_mean"] = ssim_mean();
  j["count"] = count();
  return j.dump();
}

void MetricsReport::write(const std::filesystem::path& csv_path, const std::filesystem::path& json_path) const {
  for (const auto& p : {csv_path, json_path}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream(csv_path) << to_csv();
  std::ofstream(json_path) << summary_json() << '\n';
}

// --- augmentation ---------------------------------------------------------

CropWindow draw_crop_window(std::int64_t height, std::int64_t width, std::int64_t size, std::mt19937_64& rng) {
  if (size < 1 || size > height || size > width) {
    std::ostringstream os;
    os << "crop size " << size << " larger than image " << height << "x" << width;
    throw ShapeError(os.str());
  }
  std::uniform_int_distribution<std::int64_t> dy(0, height - size);
  std::uniform_int_distribution<std::int64_t> dx(0, width - size);
  CropWindow w;
  w.top = dy(rng);
  w.left = dx(rng);
  w.size = size;
  return w;
}

FlipDecision draw_flips(double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("flip probability must lie in [0, 1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FlipDecision d;
  d.horizontal = u(rng) < p;
  d.vertical = u(rng) < p;
  return d;
}

torch::Tensor crop_hw(const torch::Tensor& t, const CropWindow& w) {
  const auto nd = t.dim();
  return t.narrow(nd - 2, w.top, w.size).narrow(nd - 1, w.left, w.size).contiguous();
}

torch::Tensor flip_hw(const torch::Tensor& t, const FlipDecision& flips) {
  std::vector<std::int64_t> dims;
  if (flips.vertical) dims.push_back(t.dim() - 2);
  if (flips.horizontal) dims.push_back(t.dim() - 1);
  if (dims.empty()) return t;
  return t.flip(dims).contiguous();
}

ImagePair crop_pair(const ImagePair& pair, const CropWindow& window) {
  if (pair.rainy.tensor().sizes() != pair.clean.tensor().sizes()) throw ShapeError("crop_pair: misaligned pair");
  if (window.size < 1 || window.top < 0 || window.left < 0 || window.top + window.size > pair.rainy.height() ||
      window.left + window.size > pair.rainy.width()) {
    throw ShapeError("crop window outside image");
  }
  return {Image(crop_hw(pair.rainy.tensor(), window)), Image(crop_hw(pair.clean.tensor(), window)), pair.id};
}

ImagePair flip_pair(const ImagePair& pair, const FlipDecision& flips) {
  return {Image(flip_hw(pair.rainy.tensor(), flips)), Image(flip_hw(pair.clean.tensor(), flips)), pair.id};
}

ImagePair random_crop_pair(const ImagePair& pair, std::int64_t size, std::mt19937_64& rng) {
  return crop_pair(pair, draw_crop_window(pair.rainy.height(), pair.rainy.width(), size, rng));
}

ImagePair random_crop_pair(const ImagePair& pair, std::int64_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_crop_pair(pair, size, rng);
}

ImagePair random_flip_pair(const ImagePair& pair, double p, std::mt19937_64& rng) {
  return flip_pair(pair, draw_flips(p, rng));
}

ImagePair random_flip_pair(const ImagePair& pair, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_flip_pair(pair, p, rng);
}

}  // namespace cliprpn
