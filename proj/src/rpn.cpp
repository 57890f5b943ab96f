#include "cliprpn/rpn.hpp"

#include <sstream>

#include "cliprpn/errors.hpp"

namespace cliprpn {

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

RoutingDecision decide(std::vector<double> scores) {
  RoutingDecision d;
  d.selected = argmax_lowest(scores);
  d.scores = std::move(scores);
  return d;
}

RoutingDecision route(const Embedding& img_embedding, std::span<const Embedding> prompt_embeddings,
                      const VlmGateway& gateway) {
  return decide(gateway.match_scores(img_embedding, prompt_embeddings));
}

RoutingDecision route(const Image& img, const PromptSet& prompts, VlmGateway& gateway) {
  prompts.validate();
  const auto texts = gateway.encode_prompts(prompts);
  return route(gateway.encode_image(img), texts, gateway);
}

MaskPredictorImpl::MaskPredictorImpl(std::int64_t in_channels, std::int64_t hidden_channels) {
  conv1 = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, hidden_channels, 3).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden_channels, 1, 1)));
}

torch::Tensor MaskPredictorImpl::logits(const torch::Tensor& x) {
  return conv2->forward(torch::gelu(conv1->forward(x)));
}

torch::Tensor MaskPredictorImpl::forward(const torch::Tensor& x) { return torch::sigmoid(logits(x)); }

RainMask predict_mask(const torch::Tensor& features, MaskPredictor& predictor, int level) {
  torch::NoGradGuard no_grad;
  auto x = features.dim() == 3 ? features.unsqueeze(0) : features;
  auto m = predictor->forward(x);
  return {m[0][0].to(torch::kFloat32), MaskKind::predicted, level};
}

torch::Tensor bce_mask_loss(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) {
    std::ostringstream os;
    os << "bce_mask_loss: shape mismatch " << pred.sizes() << " vs " << gt.sizes();
    throw ShapeError(os.str());
  }
  auto p = pred.clamp(kBceClamp, 1.0 - kBceClamp);
  auto g = gt.to(p.scalar_type());
  return -(g * torch::log(p) + (1.0 - g) * torch::log(1.0 - p)).mean();
}

double bce_mask_loss(const RainMask& pred, const RainMask& gt) {
  return bce_mask_loss(pred.values.to(torch::kFloat64), gt.values.to(torch::kFloat64)).item<double>();
}

std::array<torch::Tensor, 3> multilevel_mask_losses(std::span<const torch::Tensor> preds, const torch::Tensor& gt_full) {
  if (preds.size() != 3) throw ShapeError("multilevel_mask_losses expects 3 predictions");
  std::array<torch::Tensor, 3> out;
  int factor = 1;
  for (std::size_t i = 0; i < 3; ++i, factor *= 2) {
    auto gt = downsample_mask_tensor(gt_full, factor);
    if (preds[i].sizes() != gt.sizes()) {
      std::ostringstream os;
      os << "level " << i << " prediction " << preds[i].sizes() << " does not match mask " << gt.sizes();
      throw ShapeError(os.str());
    }
    out[i] = bce_mask_loss(preds[i], gt);
  }
  return out;
}

}  // namespace cliprpn
