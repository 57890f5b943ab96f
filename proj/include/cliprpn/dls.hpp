#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cliprpn/imaging.hpp"

namespace cliprpn {

// Shape of f(tau) in the exponent beta + eta * f(tau) / T.
enum class ScheduleShape {
  linear,  // f(tau) = tau
  cosine,  // f(tau) = T (1 - cos(pi tau / T)) / 2
  step,    // f(tau) = T floor(4 tau / T) / 4
};

std::string to_string(ScheduleShape shape);
ScheduleShape schedule_shape_from_string(const std::string& s);

inline constexpr double kDlsEpsilonFloor = 1e-6;

// Progress-dependent reconstruction exponent: small errors dominate early, large errors late.
struct LossSchedule {
  double beta = 0.8;
  double eta = 2.3;
  std::int64_t total_steps = 1;
  ScheduleShape shape = ScheduleShape::linear;

  void validate() const;
  double f(std::int64_t tau) const;
  double exponent(std::int64_t tau) const;
};

// mean(max(|pred - target|, 1e-6) ^ exponent(tau)); differentiable in `pred`.
torch::Tensor dls_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossSchedule& schedule,
                       std::int64_t tau);
double dls_loss(const Image& pred, const Image& target, const LossSchedule& schedule, std::int64_t tau);

// d/d(eps) of eps^p at each grid point, p = exponent(tau).
std::vector<double> dls_gradient_profile(const LossSchedule& schedule, std::int64_t tau,
                                         std::span<const double> eps_grid);

enum class LossKind { dls, l1, l2, huber };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);

inline constexpr double kHuberDelta = 1.0;

// l1, l2 (mean squared) and Huber (delta 1), all mean-reduced. `dls` is rejected here.
torch::Tensor baseline_losses(const torch::Tensor& pred, const torch::Tensor& target, LossKind kind);

torch::Tensor reconstruction_loss(const torch::Tensor& pred, const torch::Tensor& target, LossKind kind,
                                  const LossSchedule& schedule, std::int64_t tau);

inline constexpr double kMaskLossWeight = 0.1;

struct TotalLossBreakdown {
  double reconstruction = 0.0;
  std::array<double, 3> mask_bce{};
  double total = 0.0;
  double current_exponent = 0.0;
};

struct TotalLoss {
  torch::Tensor total;  // differentiable
  TotalLossBreakdown breakdown;
};

// total = sum_i 0.1 * bce_i + reconstruction. Empty `mask_preds` drops the mask term (no MGCA).
TotalLoss total_loss(const torch::Tensor& pred, const torch::Tensor& target, std::span<const torch::Tensor> mask_preds,
                     std::span<const torch::Tensor> mask_gts, const LossSchedule& schedule, std::int64_t tau,
                     LossKind kind = LossKind::dls);

}  // namespace cliprpn
