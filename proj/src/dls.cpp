#include "cliprpn/dls.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "cliprpn/errors.hpp"
#include "cliprpn/rpn.hpp"

namespace cliprpn {

std::string to_string(ScheduleShape shape) {
  switch (shape) {
    case ScheduleShape::linear: return "linear";
    case ScheduleShape::cosine: return "cosine";
    case ScheduleShape::step: return "step";
  }
  return "linear";
}

ScheduleShape schedule_shape_from_string(const std::string& s) {
  if (s == "linear") return ScheduleShape::linear;
  if (s == "cosine") return ScheduleShape::cosine;
  if (s == "step") return ScheduleShape::step;
  throw ConfigError("unknown schedule shape: " + s);
}

void LossSchedule::validate() const {
  if (!(beta > 0.0)) throw ConfigError("DLS beta must be > 0");
  if (!(eta >= 0.0)) throw ConfigError("DLS eta must be >= 0");
  if (total_steps < 1) throw ConfigError("DLS total_steps must be >= 1");
}

double LossSchedule::f(std::int64_t tau) const {
  const auto t = static_cast<double>(tau);
  const auto T = static_cast<double>(total_steps);
  switch (shape) {
    case ScheduleShape::linear: return t;
    case ScheduleShape::cosine: return T * (1.0 - std::cos(std::numbers::pi * t / T)) / 2.0;
    case ScheduleShape::step: return T * std::floor(4.0 * t / T) / 4.0;
  }
  return t;
}

double LossSchedule::exponent(std::int64_t tau) const {
  if (tau < 0 || tau > total_steps) {
    throw std::out_of_range("tau " + std::to_string(tau) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  return beta + eta * f(tau) / static_cast<double>(total_steps);
}

torch::Tensor dls_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossSchedule& schedule,
                       std::int64_t tau) {
  if (pred.sizes() != target.sizes()) {
    std::ostringstream os;
    os << "dls_loss: shape mismatch " << pred.sizes() << " vs " << target.sizes();
    throw ShapeError(os.str());
  }
  schedule.validate();
  const double p = schedule.exponent(tau);
  auto eps = (pred - target.to(pred.scalar_type())).abs().clamp_min(kDlsEpsilonFloor);
  return eps.pow(p).mean();
}

double dls_loss(const Image& pred, const Image& target, const LossSchedule& schedule, std::int64_t tau) {
  return dls_loss(pred.tensor().to(torch::kFloat64), target.tensor().to(torch::kFloat64), schedule, tau)
      .item<double>();
}

std::vector<double> dls_gradient_profile(const LossSchedule& schedule, std::int64_t tau,
                                         std::span<const double> eps_grid) {
  const double p = schedule.exponent(tau);
  std::vector<double> out;
  out.reserve(eps_grid.size());
  for (double e : eps_grid) out.push_back(p * std::pow(e, p - 1.0));
  return out;
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::dls: return "dls";
    case LossKind::l1: return "l1";
    case LossKind::l2: return "l2";
    case LossKind::huber: return "huber";
  }
  return "dls";
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "dls") return LossKind::dls;
  if (s == "l1") return LossKind::l1;
  if (s == "l2") return LossKind::l2;
  if (s == "huber") return LossKind::huber;
  throw ConfigError("unknown loss kind: " + s);
}

torch::Tensor baseline_losses(const torch::Tensor& pred, const torch::Tensor& target, LossKind kind) {
  if (pred.sizes() != target.sizes()) throw ShapeError("baseline_losses: shape mismatch");
  auto diff = pred - target.to(pred.scalar_type());
  switch (kind) {
    case LossKind::l1: return diff.abs().mean();
    case LossKind::l2: return diff.pow(2).mean();
    case LossKind::huber: {
      auto a = diff.abs();
      auto quad = 0.5 * diff.pow(2);
      auto lin = kHuberDelta * (a - 0.5 * kHuberDelta);
      return torch::where(a <= kHuberDelta, quad, lin).mean();
    }
    case LossKind::dls: break;
  }
  throw ConfigError("baseline_losses: '" + to_string(kind) + "' is not a baseline loss");
}

torch::Tensor reconstruction_loss(const torch::Tensor& pred, const torch::Tensor& target, LossKind kind,
                                  const LossSchedule& schedule, std::int64_t tau) {
  if (kind == LossKind::dls) return dls_loss(pred, target, schedule, tau);
  return baseline_losses(pred, target, kind);
}

TotalLoss total_loss(const torch::Tensor& pred, const torch::Tensor& target, std::span<const torch::Tensor> mask_preds,
                     std::span<const torch::Tensor> mask_gts, const LossSchedule& schedule, std::int64_t tau,
                     LossKind kind) {
  if (mask_preds.size() != mask_gts.size()) throw ShapeError("total_loss: mask prediction/target count mismatch");
  if (!mask_preds.empty() && mask_preds.size() != 3) throw ShapeError("total_loss expects 3 mask levels");
  TotalLoss out;
  auto recon = reconstruction_loss(pred, target, kind, schedule, tau);
  out.breakdown.reconstruction = recon.item<double>();
  out.breakdown.current_exponent = schedule.exponent(tau);
  auto total = recon;
  double bce_sum = 0.0;
  for (std::size_t i = 0; i < mask_preds.size(); ++i) {
    auto bce = bce_mask_loss(mask_preds[i], mask_gts[i]);
    out.breakdown.mask_bce[i] = bce.item<double>();
    total = total + kMaskLossWeight * bce;
  }
  for (double b : out.breakdown.mask_bce) bce_sum += b * kMaskLossWeight;
  out.breakdown.total = bce_sum + out.breakdown.reconstruction;
  out.total = total;
  return out;
}

}  // namespace cliprpn
