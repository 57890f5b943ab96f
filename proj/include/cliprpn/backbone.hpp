#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cliprpn/dataset.hpp"
#include "cliprpn/imaging.hpp"
#include "cliprpn/mgca.hpp"
#include "cliprpn/rpn.hpp"

namespace cliprpn {

inline constexpr int kLevels = 4;
inline constexpr int kMgcaLevels = 3;
inline constexpr std::int64_t kSizeMultiple = 8;  // three halvings

struct BackboneConfig {
  std::vector<std::int64_t> level_channels{32, 64, 128, 256};
  std::vector<std::int64_t> blocks_per_level{2, 2, 2, 2};
  std::vector<std::int64_t> heads_per_level{1, 2, 4, 8};
  std::vector<std::int64_t> mgca_heads{1, 2, 4};
  std::int64_t n_subnets = 2;
  std::int64_t window = 8;
  double mlp_ratio = 2.0;
  std::int64_t gate_reduction = 8;
  bool use_mgca = true;
  bool zero_init_head = true;

  // Default desk-scale model.
  static BackboneConfig desk();
  // Approximates the reported full model size.
  static BackboneConfig full();
  // 8/16/32/64 channels, one block per level.
  static BackboneConfig toy();

  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Pre-norm transformer block: window self-attention then MLP, both residual.
// Operates on channels-last tokens [B, H, W, C]; windows are non-overlapping.
class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(std::int64_t channels, std::int64_t heads, std::int64_t window);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear proj{nullptr};

 private:
  std::int64_t channels_, heads_, window_;
};
TORCH_MODULE(WindowAttention);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(std::int64_t channels, std::int64_t heads, std::int64_t window, double mlp_ratio);
  // [B, C, H, W] -> [B, C, H, W]
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  WindowAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TransformerBlock);

struct ForwardOutput {
  torch::Tensor output;              // input + residual, unclamped
  std::vector<torch::Tensor> masks;  // shallow -> deep, [B, 1, H / 2^l, W / 2^l]; empty without MGCA
};

class ClipRpnNetImpl : public torch::nn::Module {
 public:
  explicit ClipRpnNetImpl(BackboneConfig cfg);

  // x: [B, 3, H, W] with H, W divisible by 8; every image in the batch goes to sub-network `route`.
  ForwardOutput forward(const torch::Tensor& x, std::int64_t route);

  const BackboneConfig& config() const { return cfg_; }
  // Name prefix shared by every parameter of MGCA sub-network `route` at `level`.
  static std::string subnet_prefix(std::int64_t route, int level);
  // Names of parameters belonging to sub-network `route` (all three levels).
  std::vector<std::string> subnet_parameter_names(std::int64_t route) const;

  torch::nn::Conv2d patch_embed{nullptr};
  std::vector<torch::nn::Sequential> encoders;
  std::vector<torch::nn::Conv2d> downs;
  std::vector<torch::nn::ConvTranspose2d> ups;
  std::vector<torch::nn::Conv2d> fuses;
  std::vector<torch::nn::Sequential> decoders;
  std::vector<MaskPredictor> mask_predictors;
  std::vector<std::vector<Mgca>> subnets;  // [route][level]
  torch::nn::Conv2d head{nullptr};

 private:
  BackboneConfig cfg_;
};
TORCH_MODULE(ClipRpnNet);

std::int64_t count_params(torch::nn::Module& net);

struct DerainResult {
  Image derained;
  std::vector<RainMask> masks;
};

// Image-level inference; `img` must have dimensions divisible by 8.
DerainResult forward(const Image& img, const RoutingDecision& decision, ClipRpnNet& net);
// Reflect-pads any size up to a multiple of 8, runs the net, crops back.
DerainResult derain_padded(const Image& img, std::int64_t route, ClipRpnNet& net);

torch::Tensor pad_to_multiple(const torch::Tensor& x, std::int64_t multiple);

}  // namespace cliprpn
