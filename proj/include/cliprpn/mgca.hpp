#pragma once

#include <cstdint>
#include <utility>

#include <torch/torch.h>

namespace cliprpn {

// F_r = F * M, F_n = F * (1 - M); `mask` is [B, 1, H, W] and broadcasts over channels.
std::pair<torch::Tensor, torch::Tensor> split_regions(const torch::Tensor& features, const torch::Tensor& mask);

// Multi-dconv-head transposed cross-attention. Queries, keys and values come from
// independent 1x1 + 3x3 depthwise projections; attention is a per-head C_h x C_h
// matrix softmax(Q K^T / alpha) over the channel axis, so cost is linear in H*W.
// Q and K rows are L2-normalised along the spatial axis before the product.
class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(std::int64_t channels, std::int64_t heads);

  torch::Tensor forward(const torch::Tensor& q_src, const torch::Tensor& k_src, const torch::Tensor& v_src);
  // [B, heads, C_h, C_h]; rows sum to one.
  torch::Tensor attention(const torch::Tensor& q_src, const torch::Tensor& k_src);
  // Per-head attention applied to already-projected values, before the output projection.
  torch::Tensor attend(const torch::Tensor& attn, const torch::Tensor& v) const;
  torch::Tensor project_values(const torch::Tensor& v_src);

  // alpha = exp(log_alpha) > 0, one per head.
  torch::Tensor alpha() const { return log_alpha.exp(); }

  std::int64_t channels() const { return channels_; }
  std::int64_t heads() const { return heads_; }

  torch::nn::Conv2d q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr};
  torch::nn::Conv2d q_dw{nullptr}, k_dw{nullptr}, v_dw{nullptr};
  torch::nn::Conv2d out_proj{nullptr};
  torch::Tensor log_alpha;

 private:
  torch::Tensor split_heads(const torch::Tensor& x) const;

  std::int64_t channels_;
  std::int64_t heads_;
};
TORCH_MODULE(CrossAttention);

// Spatial gate from the rainy branch: channel-wise mean and max maps, 7x7 conv (2 -> 1), sigmoid.
class RainSpatialGateImpl : public torch::nn::Module {
 public:
  RainSpatialGateImpl();
  torch::Tensor forward(const torch::Tensor& f_r);  // [B, 1, H, W]
  static torch::Tensor pooled(const torch::Tensor& f_r);  // [B, 2, H, W] = cat(avg, max)

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(RainSpatialGate);

// Channel gate from the non-rainy branch: sigmoid(W2 relu(W1 avg) + W4 relu(W3 max)).
class NonRainChannelGateImpl : public torch::nn::Module {
 public:
  explicit NonRainChannelGateImpl(std::int64_t channels, std::int64_t reduction = 8);
  torch::Tensor forward(const torch::Tensor& f_n);  // [B, C, 1, 1]

  torch::nn::Conv2d w1{nullptr}, w2{nullptr}, w3{nullptr}, w4{nullptr};
};
TORCH_MODULE(NonRainChannelGate);

struct MgcaTrace {
  torch::Tensor f_r, f_n;
  torch::Tensor f_r_ca, f_n_ca;
  torch::Tensor spatial_gate, channel_gate;
  torch::Tensor f_s;
};

// One mask-guided cross-attention sub-network.
class MgcaImpl : public torch::nn::Module {
 public:
  MgcaImpl(std::int64_t channels, std::int64_t heads, std::int64_t reduction = 8);

  // features [B, C, H, W], mask [B, 1, H, W] -> refined features [B, C, H, W].
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& mask);
  torch::Tensor forward_traced(const torch::Tensor& features, const torch::Tensor& mask, MgcaTrace* trace);

  CrossAttention rain_attention{nullptr};
  CrossAttention nonrain_attention{nullptr};
  CrossAttention refine_attention{nullptr};
  RainSpatialGate spatial_gate{nullptr};
  NonRainChannelGate channel_gate{nullptr};
};
TORCH_MODULE(Mgca);

}  // namespace cliprpn
