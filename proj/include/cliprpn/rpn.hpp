#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "cliprpn/dataset.hpp"
#include "cliprpn/vlm_gateway.hpp"

namespace cliprpn {

struct RoutingDecision {
  std::vector<double> scores;
  std::size_t selected = 0;
};

// Index of the largest value; ties resolve to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);
RoutingDecision decide(std::vector<double> scores);

// Scores the image against every prompt and picks the best-matching sub-network.
RoutingDecision route(const Image& img, const PromptSet& prompts, VlmGateway& gateway);
RoutingDecision route(const Embedding& img_embedding, std::span<const Embedding> prompt_embeddings,
                      const VlmGateway& gateway);

// Pixel-level rain confidence head: 3x3 conv, GELU, 1x1 conv to one channel, sigmoid.
class MaskPredictorImpl : public torch::nn::Module {
 public:
  MaskPredictorImpl(std::int64_t in_channels, std::int64_t hidden_channels);

  // [B, C, H, W] -> [B, 1, H, W] in (0, 1).
  torch::Tensor forward(const torch::Tensor& x);
  // Pre-sigmoid logits; useful for numerically careful losses.
  torch::Tensor logits(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr};
  torch::nn::Conv2d conv2{nullptr};
};
TORCH_MODULE(MaskPredictor);

RainMask predict_mask(const torch::Tensor& features, MaskPredictor& predictor, int level = 0);

inline constexpr double kBceClamp = 1e-7;

// Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]. Differentiable in `pred`.
torch::Tensor bce_mask_loss(const torch::Tensor& pred, const torch::Tensor& gt);
double bce_mask_loss(const RainMask& pred, const RainMask& gt);

// Per-level BCE, shallow to deep. `preds` are at factors 1, 2, 4 of `gt_full` ([B, 1, H, W]).
std::array<torch::Tensor, 3> multilevel_mask_losses(std::span<const torch::Tensor> preds, const torch::Tensor& gt_full);

}  // namespace cliprpn
