#include <gtest/gtest.h>

#include <cmath>

#include "cliprpn/dataset.hpp"
#include "cliprpn/dls.hpp"
#include "cliprpn/errors.hpp"

using namespace cliprpn;

namespace {

LossSchedule schedule(std::int64_t total) {
  LossSchedule s;
  s.total_steps = total;
  return s;
}

torch::Tensor uniform_error(double eps) {
  auto target = torch::full({2, 3, 4, 4}, 0.25, torch::kFloat64);
  return target + eps;
}

}  // namespace

TEST(Schedule, EndpointsAreExact) {
  auto s = schedule(1000);
  EXPECT_NEAR(s.exponent(0), 0.8, 1e-12);
  EXPECT_NEAR(s.exponent(1000), 3.1, 1e-12);
  EXPECT_NEAR(s.exponent(500), 0.8 + 2.3 / 2, 1e-12);
  for (auto shape : {ScheduleShape::cosine, ScheduleShape::step}) {
    s.shape = shape;
    EXPECT_NEAR(s.exponent(0), 0.8, 1e-12);
    EXPECT_NEAR(s.exponent(1000), 3.1, 1e-12);
  }
}

TEST(Schedule, NonDecreasingAndValidated) {
  for (auto shape : {ScheduleShape::linear, ScheduleShape::cosine, ScheduleShape::step}) {
    auto s = schedule(97);
    s.shape = shape;
    for (std::int64_t t = 1; t <= 97; ++t) EXPECT_GE(s.exponent(t), s.exponent(t - 1));
  }
  auto s = schedule(10);
  EXPECT_THROW(s.exponent(-1), std::out_of_range);
  EXPECT_THROW(s.exponent(11), std::out_of_range);
  s.beta = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = schedule(0);
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_EQ(schedule_shape_from_string(to_string(ScheduleShape::cosine)), ScheduleShape::cosine);
  EXPECT_THROW(schedule_shape_from_string("exp"), ConfigError);
}

TEST(DlsLoss, ClosedForms) {
  auto s = schedule(100);
  auto target = torch::full({2, 3, 4, 4}, 0.25, torch::kFloat64);
  EXPECT_NEAR(dls_loss(uniform_error(0.5), target, s, 0).item<double>(), std::pow(0.5, 0.8), 1e-12);
  EXPECT_NEAR(dls_loss(uniform_error(0.5), target, s, 0).item<double>(), 0.574349, 1e-6);
  EXPECT_NEAR(dls_loss(uniform_error(0.5), target, s, 100).item<double>(), 0.116629, 1e-6);
  for (std::int64_t t : {0, 37, 100}) {
    EXPECT_NEAR(dls_loss(uniform_error(0.75), target, s, t).item<double>(), std::pow(0.75, s.exponent(t)), 1e-12);
  }
  auto ones = torch::ones({3, 2, 2}, torch::kFloat64);
  for (std::int64_t t : {0, 50, 100}) {
    EXPECT_NEAR(dls_loss(ones, torch::zeros_like(ones), s, t).item<double>(), 1.0, 1e-12);
  }
  EXPECT_NEAR(dls_loss(target, target, s, 0).item<double>(), std::pow(kDlsEpsilonFloor, 0.8), 1e-15);
}

TEST(DlsLoss, ImageOverloadAndErrors) {
  auto s = schedule(10);
  auto a = Image::filled(4, 4, 0.5f, 0.5f, 0.5f), b = Image::zeros(4, 4);
  EXPECT_NEAR(dls_loss(a, b, s, 10), std::pow(0.5, 3.1), 1e-9);
  EXPECT_THROW(dls_loss(a, Image::zeros(4, 5), s, 0), ShapeError);
  EXPECT_THROW(dls_loss(a, b, s, 11), std::out_of_range);
}

TEST(DlsLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(3);
  auto target = torch::rand({1, 3, 6, 6}, torch::kFloat64);
  auto sign = torch::where(torch::rand({1, 3, 6, 6}, torch::kFloat64) > 0.5, 1.0, -1.0);
  auto pred0 = target + sign * (0.01 + 0.99 * torch::rand({1, 3, 6, 6}, torch::kFloat64));
  auto s = schedule(40);
  for (std::int64_t tau : {0, 7, 20, 40}) {
    auto pred = pred0.clone().requires_grad_(true);
    dls_loss(pred, target, s, tau).backward();
    auto g = pred.grad().view({-1});
    auto flat = pred0.clone();
    auto fv = flat.view({-1});
    for (std::int64_t i = 0; i < fv.numel(); i += 5) {
      const double h = 1e-7, orig = fv[i].item<double>();
      fv[i] = orig + h;
      const double up = dls_loss(flat, target, s, tau).item<double>();
      fv[i] = orig - h;
      const double down = dls_loss(flat, target, s, tau).item<double>();
      fv[i] = orig;
      const double fd = (up - down) / (2 * h), an = g[i].item<double>();
      EXPECT_LE(std::abs(fd - an), 1e-4 * std::abs(an)) << "tau " << tau << " index " << i;
    }
  }
}

TEST(GradientProfile, Regimes) {
  std::vector<double> grid;
  for (int i = 1; i <= 100; ++i) grid.push_back(i / 100.0);
  LossSchedule s;
  s.beta = 0.8;
  s.eta = 2.3;
  s.total_steps = 23;
  // p = 0.8 at tau 0, p = 1 at tau 2, p = 2 at tau 12.
  auto low = dls_gradient_profile(s, 0, grid);
  for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_LT(low[i], low[i - 1]);
  auto unit = dls_gradient_profile(s, 2, grid);
  for (double g : unit) EXPECT_NEAR(g, 1.0, 1e-12);
  auto quad = dls_gradient_profile(s, 12, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(quad[i], 2.0 * grid[i], 1e-12);
  auto late = dls_gradient_profile(s, 23, grid);
  for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_GT(late[i], late[i - 1]);
}

TEST(GradientProfile, AgreesWithAutograd) {
  auto s = schedule(10);
  std::vector<double> grid{0.01, 0.2, 0.5, 0.9, 1.0};
  auto profile = dls_gradient_profile(s, 6, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto pred = torch::full({1}, grid[i], torch::kFloat64).requires_grad_(true);
    dls_loss(pred, torch::zeros({1}, torch::kFloat64), s, 6).backward();
    EXPECT_NEAR(pred.grad().item<double>(), profile[i], 1e-12);
  }
}

TEST(Baselines, ClosedForms) {
  auto target = torch::zeros({2, 3, 4, 4}, torch::kFloat64);
  auto pred = torch::full({2, 3, 4, 4}, 0.5, torch::kFloat64);
  EXPECT_NEAR(baseline_losses(pred, target, LossKind::l1).item<double>(), 0.5, 1e-15);
  EXPECT_NEAR(baseline_losses(pred, target, LossKind::l2).item<double>(), 0.25, 1e-15);
  EXPECT_NEAR(baseline_losses(pred, target, LossKind::huber).item<double>(), 0.125, 1e-15);
  EXPECT_NEAR(baseline_losses(target + 3.0, target, LossKind::huber).item<double>(), 2.5, 1e-15);
  for (auto k : {LossKind::l1, LossKind::l2, LossKind::huber}) {
    EXPECT_EQ(baseline_losses(pred, pred, k).item<double>(), 0.0);
  }
  EXPECT_THROW(baseline_losses(pred, target, LossKind::dls), ConfigError);
  EXPECT_THROW(baseline_losses(pred, torch::zeros({1}), LossKind::l1), ShapeError);
}

TEST(Baselines, L2BelowL1InsideUnitErrors) {
  torch::manual_seed(9);
  for (int i = 0; i < 20; ++i) {
    auto a = torch::rand({3, 8, 8}, torch::kFloat64), b = torch::rand({3, 8, 8}, torch::kFloat64);
    EXPECT_LE(baseline_losses(a, b, LossKind::l2).item<double>(), baseline_losses(a, b, LossKind::l1).item<double>());
  }
  for (auto k : {LossKind::dls, LossKind::l1, LossKind::l2, LossKind::huber}) {
    EXPECT_EQ(loss_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(loss_kind_from_string("ssim"), ConfigError);
}

TEST(TotalLoss, HalfMasksAndExactReconstruction) {
  auto s = schedule(10);
  auto img = torch::rand({1, 3, 16, 16}, torch::kFloat64);
  auto gt = (torch::rand({1, 1, 16, 16}, torch::kFloat64) > 0.5).to(torch::kFloat64);
  std::vector<torch::Tensor> preds{torch::full({1, 1, 16, 16}, 0.5, torch::kFloat64),
                                   torch::full({1, 1, 8, 8}, 0.5, torch::kFloat64),
                                   torch::full({1, 1, 4, 4}, 0.5, torch::kFloat64)};
  std::vector<torch::Tensor> gts{gt, downsample_mask_tensor(gt, 2), downsample_mask_tensor(gt, 4)};
  auto l = total_loss(img, img, preds, gts, s, 10, LossKind::l1);
  EXPECT_NEAR(l.total.item<double>(), 0.3 * std::log(2.0), 1e-9);
  EXPECT_NEAR(l.breakdown.total, 0.207944, 1e-6);
  EXPECT_NEAR(l.breakdown.current_exponent, 3.1, 1e-12);
  for (double b : l.breakdown.mask_bce) EXPECT_NEAR(b, std::log(2.0), 1e-12);
}

TEST(TotalLoss, BreakdownIdentityAndGradient) {
  torch::manual_seed(2);
  auto s = schedule(50);
  auto pred = torch::rand({2, 3, 8, 8}, torch::kFloat64).requires_grad_(true);
  auto target = torch::rand({2, 3, 8, 8}, torch::kFloat64);
  auto gt = (torch::rand({2, 1, 8, 8}, torch::kFloat64) > 0.6).to(torch::kFloat64);
  std::vector<torch::Tensor> preds{torch::rand({2, 1, 8, 8}, torch::kFloat64), torch::rand({2, 1, 4, 4}, torch::kFloat64),
                                   torch::rand({2, 1, 2, 2}, torch::kFloat64)};
  std::vector<torch::Tensor> gts{gt, downsample_mask_tensor(gt, 2), downsample_mask_tensor(gt, 4)};
  auto l = total_loss(pred, target, preds, gts, s, 17);
  const auto& b = l.breakdown;
  EXPECT_NEAR(b.total - b.reconstruction - 0.1 * (b.mask_bce[0] + b.mask_bce[1] + b.mask_bce[2]), 0.0, 1e-9);
  EXPECT_NEAR(l.total.item<double>(), b.total, 1e-9);
  EXPECT_NEAR(b.reconstruction, dls_loss(pred, target, s, 17).item<double>(), 1e-15);
  l.total.backward();
  EXPECT_TRUE(pred.grad().defined());
}

TEST(TotalLoss, NoMasksDropsTheMaskTerm) {
  auto s = schedule(5);
  auto a = torch::full({1, 3, 4, 4}, 0.5, torch::kFloat64), b = torch::zeros({1, 3, 4, 4}, torch::kFloat64);
  auto l = total_loss(a, b, {}, {}, s, 0, LossKind::l2);
  EXPECT_NEAR(l.breakdown.total, 0.25, 1e-15);
  for (double v : l.breakdown.mask_bce) EXPECT_EQ(v, 0.0);
  std::vector<torch::Tensor> one{torch::zeros({1, 1, 4, 4})};
  EXPECT_THROW(total_loss(a, b, one, {}, s, 0), ShapeError);
  EXPECT_THROW(total_loss(a, b, one, one, s, 0), ShapeError);
}

TEST(TotalLoss, PerfectPredictionIsNearZero) {
  auto s = schedule(5);
  auto img = torch::rand({1, 3, 8, 8}, torch::kFloat64);
  auto gt = (torch::rand({1, 1, 8, 8}, torch::kFloat64) > 0.5).to(torch::kFloat64);
  std::vector<torch::Tensor> gts{gt, downsample_mask_tensor(gt, 2), downsample_mask_tensor(gt, 4)};
  auto l = total_loss(img, img, gts, gts, s, 5);
  EXPECT_LT(l.breakdown.total, 1e-6);
}
