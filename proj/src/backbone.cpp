#include "cliprpn/backbone.hpp"

#include <cmath>
#include <sstream>

#include "cliprpn/errors.hpp"
#include "cliprpn/hash.hpp"

namespace cliprpn {

namespace F = torch::nn::functional;

// --- config -------------------------------------------------------------------

BackboneConfig BackboneConfig::desk() { return {}; }

BackboneConfig BackboneConfig::full() {
  BackboneConfig c;
  c.level_channels = {64, 128, 256, 512};
  c.blocks_per_level = {4, 6, 6, 8};
  c.heads_per_level = {1, 2, 4, 8};
  c.mgca_heads = {1, 2, 4};
  c.mlp_ratio = 2.66;
  return c;
}

BackboneConfig BackboneConfig::toy() {
  BackboneConfig c;
  c.level_channels = {8, 16, 32, 64};
  c.blocks_per_level = {1, 1, 1, 1};
  c.heads_per_level = {1, 2, 4, 8};
  c.mgca_heads = {1, 2, 4};
  return c;
}

void BackboneConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(!level_channels.empty(), "backbone needs at least one level");
  need(level_channels.size() == kLevels, "backbone needs exactly 4 levels");
  need(blocks_per_level.size() == kLevels, "blocks_per_level needs 4 entries");
  need(heads_per_level.size() == kLevels, "heads_per_level needs 4 entries");
  need(mgca_heads.size() == kMgcaLevels, "mgca_heads needs 3 entries");
  for (int l = 0; l < kLevels; ++l) {
    need(level_channels[l] > 0, "channel counts must be positive");
    need(blocks_per_level[l] >= 0, "block counts must be non-negative");
    need(heads_per_level[l] > 0 && level_channels[l] % heads_per_level[l] == 0,
         "level heads must divide level channels");
    if (l > 0) need(level_channels[l] >= level_channels[l - 1], "channels must be non-decreasing with depth");
  }
  for (int l = 0; l < kMgcaLevels; ++l) {
    need(mgca_heads[l] > 0 && level_channels[l] % mgca_heads[l] == 0, "MGCA heads must divide level channels");
  }
  need(n_subnets >= 1, "n_subnets must be >= 1");
  need(window >= 1, "window must be >= 1");
  need(mlp_ratio > 0.0, "mlp_ratio must be positive");
  need(gate_reduction >= 1, "gate_reduction must be >= 1");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"level_channels", level_channels}, {"blocks_per_level", blocks_per_level},
          {"heads_per_level", heads_per_level}, {"mgca_heads", mgca_heads},
          {"n_subnets", n_subnets},            {"window", window},
          {"mlp_ratio", mlp_ratio},            {"gate_reduction", gate_reduction},
          {"use_mgca", use_mgca},              {"zero_init_head", zero_init_head}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.level_channels = j.value("level_channels", c.level_channels);
  c.blocks_per_level = j.value("blocks_per_level", c.blocks_per_level);
  c.heads_per_level = j.value("heads_per_level", c.heads_per_level);
  c.mgca_heads = j.value("mgca_heads", c.mgca_heads);
  c.n_subnets = j.value("n_subnets", c.n_subnets);
  c.window = j.value("window", c.window);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.gate_reduction = j.value("gate_reduction", c.gate_reduction);
  c.use_mgca = j.value("use_mgca", c.use_mgca);
  c.zero_init_head = j.value("zero_init_head", c.zero_init_head);
  c.validate();
  return c;
}

std::string BackboneConfig::hash() const {
  // zero_init_head only affects initialisation, not the architecture.
  auto j = to_json();
  j.erase("zero_init_head");
  return hex64(fnv1a64(j.dump()));
}

// --- transformer block ----------------------------------------------------------

WindowAttentionImpl::WindowAttentionImpl(std::int64_t channels, std::int64_t heads, std::int64_t window)
    : channels_(channels), heads_(heads), window_(window) {
  qkv = register_module("qkv", torch::nn::Linear(channels, 3 * channels));
  proj = register_module("proj", torch::nn::Linear(channels, channels));
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
  const auto wh = std::min(window_, h);
  const auto ww = std::min(window_, w);
  const auto hp = (h + wh - 1) / wh * wh;
  const auto wp = (w + ww - 1) / ww * ww;
  auto xp = x;
  if (hp != h || wp != w) xp = F::pad(x, F::PadFuncOptions({0, 0, 0, wp - w, 0, hp - h}));
  const auto nh = hp / wh, nw = wp / ww, n = wh * ww;
  auto tokens = xp.view({b, nh, wh, nw, ww, c}).permute({0, 1, 3, 2, 4, 5}).reshape({b * nh * nw, n, c});

  const auto d = c / heads_;
  auto qkv_t = qkv->forward(tokens).view({b * nh * nw, n, 3, heads_, d}).permute({2, 0, 3, 1, 4});
  auto q = qkv_t[0], k = qkv_t[1], v = qkv_t[2];
  auto attn = torch::matmul(q, k.transpose(-2, -1)) * (1.0 / std::sqrt(static_cast<double>(d)));
  if (hp != h || wp != w) {
    auto valid = torch::zeros({hp, wp}, torch::kBool);
    valid.narrow(0, 0, h).narrow(1, 0, w).fill_(true);
    auto key_valid = valid.view({nh, wh, nw, ww}).permute({0, 2, 1, 3}).reshape({nh * nw, 1, 1, n});
    key_valid = key_valid.repeat({b, 1, 1, 1});
    attn = attn.masked_fill(key_valid.logical_not(), -std::numeric_limits<double>::infinity());
  }
  attn = torch::softmax(attn, -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b * nh * nw, n, c});
  out = proj->forward(out);
  out = out.view({b, nh, nw, wh, ww, c}).permute({0, 1, 3, 2, 4, 5}).reshape({b, hp, wp, c});
  if (hp != h || wp != w) out = out.narrow(1, 0, h).narrow(2, 0, w);
  return out;
}

TransformerBlockImpl::TransformerBlockImpl(std::int64_t channels, std::int64_t heads, std::int64_t window,
                                           double mlp_ratio) {
  const auto hidden = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(channels * mlp_ratio)));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  attn = register_module("attn", WindowAttention(channels, heads, window));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
  fc1 = register_module("fc1", torch::nn::Linear(channels, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, channels));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  auto t = x.permute({0, 2, 3, 1});
  t = t + attn->forward(norm1->forward(t));
  t = t + fc2->forward(torch::gelu(fc1->forward(norm2->forward(t))));
  return t.permute({0, 3, 1, 2}).contiguous();
}

// --- network --------------------------------------------------------------------

std::string ClipRpnNetImpl::subnet_prefix(std::int64_t route, int level) {
  return "mgca_s" + std::to_string(route) + "_l" + std::to_string(level);
}

ClipRpnNetImpl::ClipRpnNetImpl(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& ch = cfg_.level_channels;
  patch_embed = register_module("patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, ch[0], 3).padding(1)));

  auto blocks = [&](int level, std::int64_t count) {
    torch::nn::Sequential seq;
    for (std::int64_t i = 0; i < count; ++i) {
      seq->push_back(TransformerBlock(ch[level], cfg_.heads_per_level[level], cfg_.window, cfg_.mlp_ratio));
    }
    return seq;
  };
  for (int l = 0; l < kLevels; ++l) {
    encoders.push_back(register_module("encoder" + std::to_string(l), blocks(l, cfg_.blocks_per_level[l])));
  }
  for (int l = 0; l + 1 < kLevels; ++l) {
    downs.push_back(register_module("down" + std::to_string(l),
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(ch[l], ch[l + 1], 2).stride(2))));
    ups.push_back(register_module(
        "up" + std::to_string(l),
        torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(ch[l + 1], ch[l], 2).stride(2))));
    fuses.push_back(register_module("fuse" + std::to_string(l),
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * ch[l], ch[l], 1))));
    decoders.push_back(register_module("decoder" + std::to_string(l), blocks(l, cfg_.blocks_per_level[l])));
  }
  if (cfg_.use_mgca) {
    for (int l = 0; l < kMgcaLevels; ++l) {
      mask_predictors.push_back(register_module("mask_predictor" + std::to_string(l), MaskPredictor(ch[l], ch[l])));
    }
    for (std::int64_t s = 0; s < cfg_.n_subnets; ++s) {
      std::vector<Mgca> per_level;
      for (int l = 0; l < kMgcaLevels; ++l) {
        per_level.push_back(register_module(subnet_prefix(s, l), Mgca(ch[l], cfg_.mgca_heads[l], cfg_.gate_reduction)));
      }
      subnets.push_back(std::move(per_level));
    }
  }
  head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch[0], 3, 3).padding(1)));
  if (cfg_.zero_init_head) {
    torch::NoGradGuard no_grad;
    head->weight.zero_();
    head->bias.zero_();
  }
}

ForwardOutput ClipRpnNetImpl::forward(const torch::Tensor& x, std::int64_t route) {
  if (x.dim() != 4 || x.size(1) != 3) throw ShapeError("network input must be [B, 3, H, W]");
  if (x.size(2) % kSizeMultiple != 0 || x.size(3) % kSizeMultiple != 0) {
    std::ostringstream os;
    os << "input " << x.size(2) << "x" << x.size(3) << " is not divisible by " << kSizeMultiple;
    throw ShapeError(os.str());
  }
  if (cfg_.use_mgca && (route < 0 || route >= cfg_.n_subnets)) {
    throw std::out_of_range("route index " + std::to_string(route) + " outside [0, " +
                            std::to_string(cfg_.n_subnets) + ")");
  }

  auto embedded = patch_embed->forward(x);
  std::vector<torch::Tensor> enc(kLevels);
  enc[0] = encoders[0]->forward(embedded);
  for (int l = 1; l < kLevels; ++l) enc[l] = encoders[l]->forward(downs[l - 1]->forward(enc[l - 1]));

  ForwardOutput out;
  std::vector<torch::Tensor> skips(kMgcaLevels);
  if (cfg_.use_mgca) out.masks.resize(kMgcaLevels);
  auto y = enc[kLevels - 1];
  for (int l = kMgcaLevels - 1; l >= 0; --l) {
    // Rain perception and mask-guided refinement of this level's features, ahead of the upsampling step.
    auto skip = enc[l];
    if (cfg_.use_mgca) {
      const auto& mask_input = l == 0 ? embedded : enc[l];
      out.masks[l] = mask_predictors[l]->forward(mask_input);
      skip = skip + subnets[route][l]->forward(skip, out.masks[l]);
    }
    y = ups[l]->forward(y);
    y = fuses[l]->forward(torch::cat({y, skip}, 1));
    y = decoders[l]->forward(y);
  }
  out.output = x + head->forward(y);
  return out;
}

std::vector<std::string> ClipRpnNetImpl::subnet_parameter_names(std::int64_t route) const {
  std::vector<std::string> names;
  for (int l = 0; l < kMgcaLevels; ++l) {
    const auto prefix = subnet_prefix(route, l) + ".";
    for (const auto& p : named_parameters()) {
      if (p.key().starts_with(prefix)) names.push_back(p.key());
    }
  }
  return names;
}

std::int64_t count_params(torch::nn::Module& net) {
  std::int64_t total = 0;
  for (const auto& p : net.parameters()) total += p.numel();
  return total;
}

// --- image level ------------------------------------------------------------------

torch::Tensor pad_to_multiple(const torch::Tensor& x, std::int64_t multiple) {
  const auto h = x.size(-2), w = x.size(-1);
  const auto ph = (multiple - h % multiple) % multiple;
  const auto pw = (multiple - w % multiple) % multiple;
  if (ph == 0 && pw == 0) return x;
  const bool can_reflect = ph < h && pw < w;
  auto opts = F::PadFuncOptions({0, pw, 0, ph});
  if (can_reflect) {
    opts.mode(torch::kReflect);
  } else {
    opts.mode(torch::kReplicate);
  }
  return F::pad(x, opts);
}

namespace {

DerainResult run(const torch::Tensor& batch, std::int64_t h, std::int64_t w, std::int64_t route, ClipRpnNet& net) {
  torch::NoGradGuard no_grad;
  auto fwd = net->forward(batch, route);
  DerainResult r{Image::from_clamped(fwd.output[0].narrow(1, 0, h).narrow(2, 0, w)), {}};
  for (std::size_t l = 0; l < fwd.masks.size(); ++l) {
    const auto f = std::int64_t{1} << l;
    const auto mh = (h + f - 1) / f, mw = (w + f - 1) / f;
    r.masks.push_back({fwd.masks[l][0][0].narrow(0, 0, mh).narrow(1, 0, mw).contiguous(), MaskKind::predicted,
                       static_cast<int>(l)});
  }
  return r;
}

}  // namespace

DerainResult forward(const Image& img, const RoutingDecision& decision, ClipRpnNet& net) {
  const auto route = static_cast<std::int64_t>(decision.selected);
  if (net->config().use_mgca && route >= net->config().n_subnets) {
    throw std::out_of_range("routing decision selects a missing sub-network");
  }
  auto param = *net->parameters().begin();
  auto x = img.tensor().unsqueeze(0).to(param.scalar_type());
  return run(x, img.height(), img.width(), route, net);
}

DerainResult derain_padded(const Image& img, std::int64_t route, ClipRpnNet& net) {
  auto param = *net->parameters().begin();
  auto x = pad_to_multiple(img.tensor().unsqueeze(0).to(param.scalar_type()), kSizeMultiple);
  return run(x, img.height(), img.width(), route, net);
}

}  // namespace cliprpn
