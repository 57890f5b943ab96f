#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <nlohmann/json.hpp>

#include "cliprpn/errors.hpp"
#include "cliprpn/imaging.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cliprpn;

namespace {

std::vector<oracle::Plane> planes(const Image& img) {
  auto t = img.tensor().to(torch::kFloat64);
  std::vector<oracle::Plane> out(3, oracle::Plane(img.height(), std::vector<double>(img.width())));
  auto a = t.accessor<double, 3>();
  for (int c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < img.height(); ++y) {
      for (std::int64_t x = 0; x < img.width(); ++x) out[c][y][x] = a[c][y][x];
    }
  }
  return out;
}

oracle::Plane plane_of(const torch::Tensor& t) {
  auto d = t.to(torch::kFloat64).contiguous();
  oracle::Plane p(d.size(0), std::vector<double>(d.size(1)));
  auto a = d.accessor<double, 2>();
  for (std::int64_t y = 0; y < d.size(0); ++y) {
    for (std::int64_t x = 0; x < d.size(1); ++x) p[y][x] = a[y][x];
  }
  return p;
}

}  // namespace

TEST(Image, RejectsBadShapes) {
  EXPECT_THROW(Image(torch::zeros({4, 8, 8})), ShapeError);
  EXPECT_THROW(Image(torch::zeros({3, 8})), ShapeError);
  EXPECT_THROW(Image(torch::zeros({3, 0, 8})), ShapeError);
}

TEST(Image, RejectsOutOfRangeAndNonFinite) {
  auto t = torch::zeros({3, 4, 4});
  t[0][0][0] = 1.5;
  EXPECT_THROW(Image{t}, std::invalid_argument);
  t[0][0][0] = std::nan("");
  EXPECT_THROW(Image{t}, std::invalid_argument);
  t[0][0][0] = -0.1;
  EXPECT_THROW(Image{t}, std::invalid_argument);
}

TEST(Image, FromClampedClamps) {
  auto img = Image::from_clamped(torch::full({3, 2, 2}, 2.0));
  EXPECT_FLOAT_EQ(img.at(1, 1, 1), 1.0f);
}

TEST(Metrics, LumaMatchesOracle) {
  auto img = test_util::random_image(7, 9, 3);
  auto ours = to_luma(img);
  auto ref = oracle::luma(planes(img));
  auto a = ours.accessor<double, 2>();
  for (int y = 0; y < 7; ++y) {
    for (int x = 0; x < 9; ++x) EXPECT_NEAR(a[y][x], ref[y][x], 1e-9);
  }
}

TEST(Metrics, LumaEndpoints) {
  EXPECT_NEAR(to_luma(Image::filled(1, 1, 0, 0, 0))[0][0].item<double>(), 16.0, 1e-12);
  EXPECT_NEAR(to_luma(Image::filled(1, 1, 1, 1, 1))[0][0].item<double>(), 235.0, 1e-9);
}

TEST(Metrics, PsnrMatchesOracle) {
  auto a = test_util::random_image(16, 12, 1);
  auto b = test_util::random_image(16, 12, 2);
  const double ref = oracle::psnr(oracle::luma(planes(a)), oracle::luma(planes(b)));
  EXPECT_NEAR(psnr(a, b), ref, 1e-9);
}

TEST(Metrics, PsnrIdenticalIsCapped) {
  auto a = test_util::random_image(8, 8, 5);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_EQ(psnr(a, a, 60.0), 60.0);
}

TEST(Metrics, PsnrUnitLumaDifference) {
  auto ya = torch::full({10, 10}, 100.0, torch::kFloat64);
  auto yb = torch::full({10, 10}, 101.0, torch::kFloat64);
  EXPECT_NEAR(psnr_luma(ya, yb), 10.0 * std::log10(255.0 * 255.0), 1e-9);
}

TEST(Metrics, SsimMatchesBruteForce) {
  auto a = test_util::random_image(24, 20, 11);
  auto noisy = (a.tensor() + 0.1 * torch::randn({3, 24, 20}, at::detail::createCPUGenerator(12))).clamp(0, 1);
  auto b = Image(noisy);
  const double ref = oracle::ssim(oracle::luma(planes(a)), oracle::luma(planes(b)));
  EXPECT_NEAR(ssim(a, b), ref, 1e-9);
}

TEST(Metrics, SsimIdenticalIsOne) {
  auto a = test_util::random_image(16, 16, 4);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Metrics, SsimConstantExtremes) {
  auto ya = torch::zeros({11, 11}, torch::kFloat64);
  auto yb = torch::full({11, 11}, 255.0, torch::kFloat64);
  EXPECT_NEAR(ssim_luma(ya, yb), oracle::ssim(plane_of(ya), plane_of(yb)), 1e-12);
  const double c1 = 6.5025;
  EXPECT_NEAR(ssim_luma(ya, yb), c1 / (255.0 * 255.0 + c1), 1e-12);
}

TEST(Metrics, SsimNeedsOneWindow) { EXPECT_THROW(ssim(Image::zeros(8, 30), Image::zeros(8, 30)), ShapeError); }

TEST(Metrics, ShapeMismatchThrows) {
  EXPECT_THROW(psnr(Image::zeros(8, 8), Image::zeros(8, 9)), ShapeError);
  EXPECT_THROW(ssim(Image::zeros(16, 16), Image::zeros(12, 16)), ShapeError);
}

TEST(MetricsReport, CsvAndSummary) {
  MetricsReport r;
  r.rows = {{"a", 30.0, 0.9}, {"b", 20.0, 0.7}};
  EXPECT_DOUBLE_EQ(r.psnr_mean(), 25.0);
  EXPECT_DOUBLE_EQ(r.ssim_mean(), 0.8);
  const auto csv = r.to_csv();
  EXPECT_EQ(csv.rfind("image,psnr,ssim\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  auto j = nlohmann::json::parse(r.summary_json());
  EXPECT_EQ(j.at("count").get<int>(), 2);
  EXPECT_DOUBLE_EQ(j.at("psnr_mean").get<double>(), 25.0);
}

TEST(Io, PngRoundTripIsExactOnTheEightBitGrid) {
  test_util::TempDir dir;
  auto img = quantize_8bit(test_util::random_image(13, 17, 9));
  save_png(img, dir.path() / "x.png");
  auto back = load_image(dir.path() / "x.png");
  EXPECT_TRUE(torch::equal(img.tensor(), back.tensor()));
}

TEST(Io, QuantizeRoundsHalfUp) {
  // 0.5 * 255 = 127.5 exactly, so it sits on a tie.
  auto img = Image::filled(1, 1, 0.5f, 1.49f / 255.0f, 254.6f / 255.0f);
  auto q = quantize_8bit(img);
  EXPECT_FLOAT_EQ(q.at(0, 0, 0) * 255.0f, 128.0f);
  EXPECT_FLOAT_EQ(q.at(1, 0, 0) * 255.0f, 1.0f);
  EXPECT_FLOAT_EQ(q.at(2, 0, 0) * 255.0f, 255.0f);
}

TEST(Io, MissingFileThrows) { EXPECT_THROW(load_image("/nonexistent/x.png"), IoError); }

TEST(Augment, CropWindowStaysInside) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    auto w = draw_crop_window(20, 30, 8, rng);
    EXPECT_GE(w.top, 0);
    EXPECT_GE(w.left, 0);
    EXPECT_LE(w.top + 8, 20);
    EXPECT_LE(w.left + 8, 30);
  }
  EXPECT_THROW(draw_crop_window(6, 30, 8, rng), ShapeError);
}

TEST(Augment, CropAndFlipAreAppliedToBothImages) {
  ImagePair p{test_util::random_image(12, 12, 1), test_util::random_image(12, 12, 2), "x"};
  auto c = crop_pair(p, {2, 3, 8});
  EXPECT_TRUE(torch::equal(c.rainy.tensor(), p.rainy.tensor().narrow(1, 2, 8).narrow(2, 3, 8)));
  EXPECT_TRUE(torch::equal(c.clean.tensor(), p.clean.tensor().narrow(1, 2, 8).narrow(2, 3, 8)));
  auto f = flip_pair(p, {true, false});
  EXPECT_TRUE(torch::equal(f.rainy.tensor(), p.rainy.tensor().flip({2})));
  EXPECT_TRUE(torch::equal(f.clean.tensor(), p.clean.tensor().flip({2})));
}

TEST(Augment, SeededDrawsAreReproducible) {
  ImagePair p{test_util::random_image(20, 20, 1), test_util::random_image(20, 20, 2), "x"};
  auto a = random_crop_pair(p, 8, std::uint64_t{42});
  auto b = random_crop_pair(p, 8, std::uint64_t{42});
  EXPECT_TRUE(torch::equal(a.rainy.tensor(), b.rainy.tensor()));
}

TEST(Augment, FlipProbabilityExtremes) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(draw_flips(0.0, rng), (FlipDecision{false, false}));
    EXPECT_EQ(draw_flips(1.0, rng), (FlipDecision{true, true}));
  }
}
