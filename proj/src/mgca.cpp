#include "cliprpn/mgca.hpp"

#include <cmath>
#include <sstream>

#include "cliprpn/errors.hpp"

namespace cliprpn {

namespace F = torch::nn::functional;

std::pair<torch::Tensor, torch::Tensor> split_regions(const torch::Tensor& features, const torch::Tensor& mask) {
  if (features.dim() != 4 || mask.dim() != 4 || mask.size(1) != 1 || mask.size(0) != features.size(0) ||
      mask.size(2) != features.size(2) || mask.size(3) != features.size(3)) {
    std::ostringstream os;
    os << "split_regions: mask " << mask.sizes() << " does not match features " << features.sizes();
    throw ShapeError(os.str());
  }
  return {features * mask, features * (1.0 - mask)};
}

// --- cross attention ------------------------------------------------------------

CrossAttentionImpl::CrossAttentionImpl(std::int64_t channels, std::int64_t heads)
    : channels_(channels), heads_(heads) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("channels (" + std::to_string(channels) + ") must divide into heads (" +
                      std::to_string(heads) + ")");
  }
  auto pointwise = [&](const char* name) {
    return register_module(name, torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1).bias(false)));
  };
  auto depthwise = [&](const char* name) {
    return register_module(
        name, torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).groups(channels).bias(false)));
  };
  q_proj = pointwise("q_proj");
  k_proj = pointwise("k_proj");
  v_proj = pointwise("v_proj");
  q_dw = depthwise("q_dw");
  k_dw = depthwise("k_dw");
  v_dw = depthwise("v_dw");
  out_proj = pointwise("out_proj");
  const double head_channels = static_cast<double>(channels / heads);
  log_alpha = register_parameter("log_alpha", torch::full({heads}, 0.5 * std::log(head_channels)));
}

torch::Tensor CrossAttentionImpl::split_heads(const torch::Tensor& x) const {
  const auto b = x.size(0);
  return x.reshape({b, heads_, channels_ / heads_, x.size(2) * x.size(3)});
}

torch::Tensor CrossAttentionImpl::attention(const torch::Tensor& q_src, const torch::Tensor& k_src) {
  if (q_src.sizes() != k_src.sizes() || q_src.dim() != 4 || q_src.size(1) != channels_) {
    std::ostringstream os;
    os << "cross attention: query " << q_src.sizes() << " / key " << k_src.sizes() << " for " << channels_
       << " channels";
    throw ShapeError(os.str());
  }
  auto q = F::normalize(split_heads(q_dw->forward(q_proj->forward(q_src))), F::NormalizeFuncOptions().dim(-1));
  auto k = F::normalize(split_heads(k_dw->forward(k_proj->forward(k_src))), F::NormalizeFuncOptions().dim(-1));
  auto logits = torch::matmul(q, k.transpose(-2, -1)) / alpha().view({1, heads_, 1, 1});
  return torch::softmax(logits, -1);
}

torch::Tensor CrossAttentionImpl::project_values(const torch::Tensor& v_src) {
  return split_heads(v_dw->forward(v_proj->forward(v_src)));
}

torch::Tensor CrossAttentionImpl::attend(const torch::Tensor& attn, const torch::Tensor& v) const {
  return torch::matmul(attn, v);
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& q_src, const torch::Tensor& k_src,
                                          const torch::Tensor& v_src) {
  if (v_src.sizes() != k_src.sizes()) throw ShapeError("cross attention: key/value shape mismatch");
  auto attn = attention(q_src, k_src);
  auto out = attend(attn, project_values(v_src)).reshape(q_src.sizes());
  return out_proj->forward(out);
}

// --- gates ----------------------------------------------------------------------

RainSpatialGateImpl::RainSpatialGateImpl() {
  // Replicate padding keeps the gate constant on constant input.
  conv = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 1, 7).padding(3).padding_mode(torch::kReplicate)));
}

torch::Tensor RainSpatialGateImpl::pooled(const torch::Tensor& f_r) {
  return torch::cat({f_r.mean(1, true), std::get<0>(f_r.max(1, true))}, 1);
}

torch::Tensor RainSpatialGateImpl::forward(const torch::Tensor& f_r) {
  return torch::sigmoid(conv->forward(pooled(f_r)));
}

NonRainChannelGateImpl::NonRainChannelGateImpl(std::int64_t channels, std::int64_t reduction) {
  const auto hidden = std::max<std::int64_t>(1, channels / reduction);
  auto conv = [](std::int64_t in, std::int64_t out) { return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)); };
  w1 = register_module("w1", conv(channels, hidden));
  w2 = register_module("w2", conv(hidden, channels));
  w3 = register_module("w3", conv(channels, hidden));
  w4 = register_module("w4", conv(hidden, channels));
}

torch::Tensor NonRainChannelGateImpl::forward(const torch::Tensor& f_n) {
  auto avg = f_n.mean({2, 3}, true);
  auto mx = std::get<0>(std::get<0>(f_n.max(3, true)).max(2, true));
  return torch::sigmoid(w2->forward(torch::relu(w1->forward(avg))) + w4->forward(torch::relu(w3->forward(mx))));
}

// --- MGCA -----------------------------------------------------------------------

MgcaImpl::MgcaImpl(std::int64_t channels, std::int64_t heads, std::int64_t reduction) {
  rain_attention = register_module("rain_attention", CrossAttention(channels, heads));
  nonrain_attention = register_module("nonrain_attention", CrossAttention(channels, heads));
  refine_attention = register_module("refine_attention", CrossAttention(channels, heads));
  spatial_gate = register_module("spatial_gate", RainSpatialGate());
  channel_gate = register_module("channel_gate", NonRainChannelGate(channels, reduction));
}

torch::Tensor MgcaImpl::forward_traced(const torch::Tensor& features, const torch::Tensor& mask, MgcaTrace* trace) {
  auto [f_r, f_n] = split_regions(features, mask);
  auto f_n_ca = nonrain_attention->forward(f_n, features, features);
  auto f_r_ca = rain_attention->forward(f_r, features, features);
  // Both gates read the branch outputs before either is modulated.
  auto w_r = spatial_gate->forward(f_r_ca);
  auto w_n = channel_gate->forward(f_n_ca);
  auto f_s = f_r_ca * w_n + f_n_ca * w_r;
  if (trace != nullptr) {
    *trace = {f_r, f_n, f_r_ca, f_n_ca, w_r, w_n, f_s};
  }
  return refine_attention->forward(features, f_s, f_s);
}

torch::Tensor MgcaImpl::forward(const torch::Tensor& features, const torch::Tensor& mask) {
  return forward_traced(features, mask, nullptr);
}

}  // namespace cliprpn
