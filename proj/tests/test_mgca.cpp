#include <gtest/gtest.h>

#include <cmath>

#include "cliprpn/errors.hpp"
#include "cliprpn/mgca.hpp"

using namespace cliprpn;

TEST(Split, RegionsAreComplementary) {
  torch::manual_seed(1);
  auto f = torch::randn({2, 6, 9, 7});
  auto m = torch::rand({2, 1, 9, 7});
  auto [fr, fn] = split_regions(f, m);
  EXPECT_LE((fr + fn - f).abs().max().item<double>(), 1e-6);
  auto binary = (m > 0.5).to(torch::kFloat32);
  auto [br, bn] = split_regions(f, binary);
  EXPECT_EQ((br * bn).abs().max().item<float>(), 0.0f);
}

TEST(Split, MaskShapeMustMatch) {
  EXPECT_THROW(split_regions(torch::zeros({1, 4, 8, 8}), torch::zeros({1, 1, 4, 4})), ShapeError);
  EXPECT_THROW(split_regions(torch::zeros({1, 4, 8, 8}), torch::zeros({1, 2, 8, 8})), ShapeError);
}

TEST(CrossAttention, RowsSumToOne) {
  torch::manual_seed(2);
  CrossAttention ca(8, 2);
  auto a = ca->attention(torch::randn({3, 8, 6, 5}), torch::randn({3, 8, 6, 5}));
  EXPECT_EQ(a.sizes(), (std::vector<std::int64_t>{3, 2, 4, 4}));
  EXPECT_LE((a.sum(-1) - 1.0).abs().max().item<double>(), 1e-6);
  EXPECT_TRUE((a >= 0).all().item<bool>());
}

TEST(CrossAttention, ConstantValuesArePreserved) {
  torch::manual_seed(3);
  CrossAttention ca(6, 3);
  auto a = ca->attention(torch::randn({1, 6, 4, 4}), torch::randn({1, 6, 4, 4}));
  // Every channel of a head carries the same value row, so any convex combination returns it.
  auto row = torch::randn({1, 3, 1, 16});
  auto v = row.expand({1, 3, 2, 16});
  auto out = ca->attend(a, v);
  EXPECT_LE((out - v).abs().max().item<double>(), 1e-6);
}

TEST(CrossAttention, AlphaStartsAtSqrtHeadChannels) {
  CrossAttention ca(16, 4);
  auto alpha = ca->alpha();
  ASSERT_EQ(alpha.numel(), 4);
  for (int h = 0; h < 4; ++h) EXPECT_NEAR(alpha[h].item<double>(), 2.0, 1e-6);
  EXPECT_THROW(CrossAttention(10, 4), ConfigError);
}

TEST(CrossAttention, CostIsLinearInSpatialSize) {
  CrossAttention ca(4, 1);
  auto small = ca->attention(torch::randn({1, 4, 8, 8}), torch::randn({1, 4, 8, 8}));
  auto large = ca->attention(torch::randn({1, 4, 32, 32}), torch::randn({1, 4, 32, 32}));
  EXPECT_EQ(small.sizes(), large.sizes());
}

TEST(Gates, ShapesAndRange) {
  torch::manual_seed(4);
  RainSpatialGate sg;
  NonRainChannelGate cg(16, 8);
  auto f = torch::randn({2, 16, 6, 6});
  auto s = sg->forward(f);
  auto c = cg->forward(f);
  EXPECT_EQ(s.sizes(), (std::vector<std::int64_t>{2, 1, 6, 6}));
  EXPECT_EQ(c.sizes(), (std::vector<std::int64_t>{2, 16, 1, 1}));
  EXPECT_TRUE(((s > 0) & (s < 1)).all().item<bool>());
  EXPECT_TRUE(((c > 0) & (c < 1)).all().item<bool>());
}

TEST(Gates, PooledChannelsAreMeanAndMax) {
  auto f = torch::randn({1, 5, 3, 4});
  auto p = RainSpatialGateImpl::pooled(f);
  EXPECT_TRUE(torch::allclose(p.select(1, 0), f.mean(1)));
  EXPECT_TRUE(torch::equal(p.select(1, 1), std::get<0>(f.max(1))));
}

TEST(Gates, SpatialGateIsConstantOnConstantInput) {
  RainSpatialGate sg;
  auto s = sg->forward(torch::full({1, 4, 9, 9}, 0.3));
  EXPECT_LE((s - s[0][0][0][0]).abs().max().item<double>(), 1e-6);
}

TEST(Mgca, PreservesShapeAndTraces) {
  torch::manual_seed(5);
  Mgca m(8, 2);
  auto f = torch::randn({2, 8, 8, 8});
  auto mask = torch::rand({2, 1, 8, 8});
  MgcaTrace trace;
  auto out = m->forward_traced(f, mask, &trace);
  EXPECT_EQ(out.sizes(), f.sizes());
  EXPECT_LE((trace.f_r + trace.f_n - f).abs().max().item<double>(), 1e-6);
  auto expected_fs = trace.f_r_ca * trace.channel_gate + trace.f_n_ca * trace.spatial_gate;
  EXPECT_TRUE(torch::allclose(trace.f_s, expected_fs));
  EXPECT_TRUE(torch::equal(out, m->forward(f, mask)));
}

TEST(Mgca, GradientMatchesFiniteDifferences) {
  torch::manual_seed(6);
  Mgca m(4, 2, 2);
  m->to(torch::kFloat64);
  auto f = torch::randn({1, 4, 8, 8}, torch::kFloat64).requires_grad_(true);
  auto mask = torch::rand({1, 1, 8, 8}, torch::kFloat64).requires_grad_(true);
  auto weights = torch::randn({1, 4, 8, 8}, torch::kFloat64);
  auto objective = [&] { return (m->forward(f, mask) * weights).sum(); };
  objective().backward();

  auto check = [&](torch::Tensor& t, torch::Tensor grad, const std::string& what) {
    auto flat = t.data().view({-1});
    auto g = grad.view({-1});
    const std::int64_t stride = std::max<std::int64_t>(1, flat.numel() / 10);
    for (std::int64_t i = 0; i < flat.numel(); i += stride) {
      torch::NoGradGuard ng;
      const double h = 1e-6, orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = objective().item<double>();
      flat[i] = orig - h;
      const double down = objective().item<double>();
      flat[i] = orig;
      const double fd = (up - down) / (2 * h), an = g[i].item<double>();
      EXPECT_LE(std::abs(fd - an), 1e-3 * std::max(std::abs(an), 1e-3)) << what << " index " << i;
    }
  };
  check(f, f.grad().clone(), "features");
  check(mask, mask.grad().clone(), "mask");
  for (auto& p : m->named_parameters()) {
    auto t = p.value();
    check(t, t.grad().clone(), p.key());
  }
}
