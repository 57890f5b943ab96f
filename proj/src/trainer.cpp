#include "cliprpn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include <ATen/autocast_mode.h>

#include "cliprpn/checkpoint.hpp"
#include "cliprpn/errors.hpp"
#include "cliprpn/hash.hpp"
#include "cliprpn/rpn.hpp"

namespace cliprpn {

namespace {

constexpr int kCheckpointFormat = 1;
constexpr std::uint64_t kShuffleStream = 0x73687566666c6531ULL;
constexpr std::uint64_t kAugmentStream = 0x6175676d656e7431ULL;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
  SplitMix64 g(seed ^ stream);
  g.next();
  SplitMix64 h(g.next() + counter);
  return h.next();
}

void need(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("train config: " + msg);
}

// RAII switch for CPU bf16 autocast.
class AutocastScope {
 public:
  explicit AutocastScope(bool on) : on_(on) {
    if (!on_) return;
    prev_ = at::autocast::is_autocast_enabled(at::kCPU);
    at::autocast::set_autocast_dtype(at::kCPU, at::kBFloat16);
    at::autocast::set_autocast_enabled(at::kCPU, true);
  }
  ~AutocastScope() {
    if (!on_) return;
    at::autocast::set_autocast_enabled(at::kCPU, prev_);
    at::autocast::clear_cache();
  }
  AutocastScope(const AutocastScope&) = delete;
  AutocastScope& operator=(const AutocastScope&) = delete;

 private:
  bool on_;
  bool prev_ = false;
};

std::string ids_hash(const PairSource& data) {
  std::uint64_t h = kFnvOffset;
  for (std::size_t i = 0; i < data.size(); ++i) {
    h = fnv1a64(data.id(i), h);
    h = fnv1a64("\n", h);
  }
  return hex64(h);
}

}  // namespace

// --- config --------------------------------------------------------------------

void TrainConfig::validate() const {
  need(lr > 0.0, "lr must be > 0");
  need(lr_min >= 0.0 && lr_min <= lr, "lr_min must lie in [0, lr]");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
       "adam betas must lie in [0, 1)");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(epochs >= 1, "epochs must be >= 1");
  need(warmup_epochs >= 0 && warmup_epochs < epochs, "warmup_epochs must lie in [0, epochs)");
  need(crop >= kSizeMultiple && crop % kSizeMultiple == 0, "crop must be a positive multiple of 8");
  need(flip_p >= 0.0 && flip_p <= 1.0, "flip_p must lie in [0, 1]");
  need(grad_clip > 0.0, "grad_clip must be > 0");
  LossSchedule{beta, eta, 1, schedule_shape}.validate();
  backbone.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"lr_min", lr_min},
          {"weight_decay", weight_decay},
          {"adam_betas", {adam_beta1, adam_beta2}},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"warmup_epochs", warmup_epochs},
          {"crop", crop},
          {"flip_p", flip_p},
          {"grad_clip", grad_clip},
          {"mixed_precision", mixed_precision},
          {"ablation", {{"rpn_on", rpn_on}, {"mgca_on", mgca_on}}},
          {"loss", to_string(loss)},
          {"beta", beta},
          {"eta", eta},
          {"schedule_shape", to_string(schedule_shape)},
          {"seed", seed},
          {"backbone", backbone.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "lr",    "lr_min",          "weight_decay", "adam_betas", "batch_size", "epochs", "warmup_epochs",
      "crop",  "flip_p",          "grad_clip",    "mixed_precision", "ablation", "loss", "beta",
      "eta",   "schedule_shape",  "seed",         "backbone"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown train config key: " + key);
  }
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("adam_betas")) {
      const auto& b = j.at("adam_betas");
      if (!b.is_array() || b.size() != 2) throw ConfigError("adam_betas must be a pair");
      c.adam_beta1 = b[0].get<double>();
      c.adam_beta2 = b[1].get<double>();
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.crop = j.value("crop", c.crop);
    c.flip_p = j.value("flip_p", c.flip_p);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.mixed_precision = j.value("mixed_precision", c.mixed_precision);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      c.rpn_on = a.value("rpn_on", c.rpn_on);
      c.mgca_on = a.value("mgca_on", c.mgca_on);
    }
    if (j.contains("loss")) c.loss = loss_kind_from_string(j.at("loss").get<std::string>());
    c.beta = j.value("beta", c.beta);
    c.eta = j.value("eta", c.eta);
    if (j.contains("schedule_shape")) {
      c.schedule_shape = schedule_shape_from_string(j.at("schedule_shape").get<std::string>());
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      if (b.is_string()) {
        const auto preset = b.get<std::string>();
        if (preset == "desk") c.backbone = BackboneConfig::desk();
        else if (preset == "full") c.backbone = BackboneConfig::full();
        else if (preset == "toy") c.backbone = BackboneConfig::toy();
        else throw ConfigError("unknown backbone preset: " + preset);
      } else {
        c.backbone = BackboneConfig::from_json(b);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string TrainConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

double lr_at(double epoch_fraction, const TrainConfig& cfg) {
  const auto E = static_cast<double>(cfg.epochs);
  const auto W = static_cast<double>(cfg.warmup_epochs);
  if (!(epoch_fraction >= 0.0 && epoch_fraction <= E)) {
    throw std::out_of_range("lr_at: epoch fraction " + std::to_string(epoch_fraction) + " outside [0, " +
                            std::to_string(cfg.epochs) + "]");
  }
  if (epoch_fraction < W) return cfg.lr * (epoch_fraction / W);
  const double progress = (epoch_fraction - W) / (E - W);
  return cfg.lr - (cfg.lr - cfg.lr_min) * (1.0 - std::cos(std::numbers::pi * progress)) / 2.0;
}

BackboneConfig effective_backbone(const TrainConfig& cfg, std::size_t n_prompts) {
  auto b = cfg.backbone;
  b.n_subnets = cfg.rpn_on ? static_cast<std::int64_t>(n_prompts) : 1;
  b.use_mgca = cfg.mgca_on;
  b.validate();
  return b;
}

std::vector<std::size_t> compute_routes(const PairSource& data, const PromptSet& prompts, VlmGateway& gateway) {
  prompts.validate();
  const auto text = gateway.encode_prompts(prompts);
  std::vector<std::size_t> routes;
  routes.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    routes.push_back(route(gateway.encode_image(data.load(i).rainy), text, gateway).selected);
  }
  return routes;
}

// --- logs ----------------------------------------------------------------------

nlohmann::json StepLog::to_json() const {
  return {{"step", step}, {"tau", tau},  {"exponent", exponent}, {"total", total},
          {"recon", recon}, {"bce", bce}, {"lr", lr},             {"grad_norm", grad_norm}};
}

nlohmann::json EpochLog::to_json() const {
  nlohmann::json j{{"epoch", epoch}, {"total", total},         {"recon", recon},
                   {"bce", bce},     {"routes", route_counts}, {"starved", starved}};
  if (eval_psnr) j["eval_psnr"] = *eval_psnr;
  if (eval_ssim) j["eval_ssim"] = *eval_ssim;
  return j;
}

// --- trainer -------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, std::shared_ptr<const PairSource> data, std::vector<std::size_t> routes,
                 PromptSet prompts)
    : cfg_(std::move(cfg)), data_(std::move(data)), routes_(std::move(routes)), prompts_(std::move(prompts)) {
  cfg_.validate();
  prompts_.validate();
  if (!data_ || data_->size() == 0) throw std::invalid_argument("training dataset is empty");
  if (routes_.size() != data_->size()) throw std::invalid_argument("one route per training image is required");
  const auto bb = effective_backbone(cfg_, prompts_.size());
  for (auto& r : routes_) {
    if (!cfg_.rpn_on) r = 0;
    if (r >= static_cast<std::size_t>(bb.n_subnets)) throw std::out_of_range("route outside the sub-network range");
  }

  const auto n = static_cast<std::int64_t>(data_->size());
  steps_per_epoch_ = (n + cfg_.batch_size - 1) / cfg_.batch_size;
  schedule_ = LossSchedule{cfg_.beta, cfg_.eta, steps_per_epoch_ * cfg_.epochs, cfg_.schedule_shape};
  cache_.resize(data_->size());

  torch::manual_seed(cfg_.seed);
  net_ = ClipRpnNet(bb);
  for (const auto& p : net_->named_parameters()) param_names_.push_back(p.key());
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      net_->parameters(), torch::optim::AdamWOptions(cfg_.lr)
                              .betas({cfg_.adam_beta1, cfg_.adam_beta2})
                              .weight_decay(cfg_.weight_decay));
}

const ImagePair& Trainer::pair(std::size_t i) const {
  if (!cache_[i]) cache_[i] = data_->load(i);
  return *cache_[i];
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t tau) const {
  const auto epoch = tau / steps_per_epoch_;
  const auto pos = tau % steps_per_epoch_;
  std::vector<std::size_t> order(data_->size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates driven by SplitMix64 so the order is identical across standard libraries.
  SplitMix64 g(stream_seed(cfg_.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[g.next() % i]);
  const auto begin = static_cast<std::size_t>(pos * cfg_.batch_size);
  const auto end = std::min(order.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

StepLog Trainer::step() {
  if (finished()) throw std::logic_error("training already finished");
  net_->train();
  const auto idx = batch_indices(tau_);
  std::mt19937_64 rng(stream_seed(cfg_.seed, kAugmentStream, static_cast<std::uint64_t>(tau_)));

  std::map<std::size_t, std::vector<ImagePair>> groups;
  for (auto i : idx) {
    auto p = random_crop_pair(pair(i), cfg_.crop, rng);
    groups[routes_[i]].push_back(random_flip_pair(p, cfg_.flip_p, rng));
  }

  optimizer_->zero_grad(true);
  StepLog log;
  log.tau = tau_;
  log.exponent = schedule_.exponent(tau_);
  const auto batch = static_cast<double>(idx.size());
  for (const auto& [r, items] : groups) {
    std::vector<torch::Tensor> rainy, clean;
    for (const auto& p : items) {
      rainy.push_back(p.rainy.tensor());
      clean.push_back(p.clean.tensor());
    }
    auto x = torch::stack(rainy);
    auto y = torch::stack(clean);
    ForwardOutput out;
    {
      AutocastScope autocast(cfg_.mixed_precision);
      out = net_->forward(x, static_cast<std::int64_t>(r));
    }
    std::vector<torch::Tensor> preds, gts;
    if (!out.masks.empty()) {
      const auto gt = gt_mask_tensor(x, y);
      for (int l = 0; l < kMgcaLevels; ++l) {
        preds.push_back(out.masks[l].to(torch::kFloat32));
        gts.push_back(downsample_mask_tensor(gt, 1 << l));
      }
    }
    auto loss = total_loss(out.output.to(torch::kFloat32), y, preds, gts, schedule_, tau_, cfg_.loss);
    const double weight = static_cast<double>(items.size()) / batch;
    (loss.total * weight).backward();
    log.total += weight * loss.breakdown.total;
    log.recon += weight * loss.breakdown.reconstruction;
    for (int l = 0; l < 3; ++l) log.bce[l] += weight * loss.breakdown.mask_bce[l];
  }

  log.grad_norm = torch::nn::utils::clip_grad_norm_(net_->parameters(), cfg_.grad_clip);
  log.lr = lr_at(static_cast<double>(tau_ + 1) / static_cast<double>(steps_per_epoch_), cfg_);
  for (auto& group : optimizer_->param_groups()) group.options().set_lr(log.lr);
  optimizer_->step();
  ++tau_;
  log.step = tau_;
  return log;
}

EpochLog Trainer::run_epoch(const TrainHooks& hooks) {
  if (finished()) throw std::logic_error("training already finished");
  EpochLog log;
  log.epoch = epoch();
  log.route_counts.assign(static_cast<std::size_t>(net_->config().n_subnets), 0);
  std::int64_t steps = 0;
  do {
    for (auto i : batch_indices(tau_)) ++log.route_counts[routes_[i]];
    const auto s = step();
    if (hooks.on_step) hooks.on_step(s);
    log.total += s.total;
    log.recon += s.recon;
    for (int l = 0; l < 3; ++l) log.bce[l] += s.bce[l];
    ++steps;
  } while (tau_ % steps_per_epoch_ != 0);
  log.total /= static_cast<double>(steps);
  log.recon /= static_cast<double>(steps);
  for (auto& b : log.bce) b /= static_cast<double>(steps);
  log.starved = std::any_of(log.route_counts.begin(), log.route_counts.end(), [](auto c) { return c == 0; });
  if (hooks.eval_data && hooks.eval_every > 0 && (epoch() % hooks.eval_every == 0 || finished())) {
    const auto routes = hooks.eval_routes.empty() ? std::vector<std::size_t>(hooks.eval_data->size(), 0)
                                                  : hooks.eval_routes;
    const auto report = evaluate(net_, *hooks.eval_data, routes);
    log.eval_psnr = report.psnr_mean();
    log.eval_ssim = report.ssim_mean();
  }
  if (hooks.on_epoch) hooks.on_epoch(log);
  return log;
}

std::vector<EpochLog> Trainer::train(const TrainHooks& hooks) {
  std::vector<EpochLog> logs;
  while (!finished()) logs.push_back(run_epoch(hooks));
  return logs;
}

// --- checkpoints ---------------------------------------------------------------

void Trainer::save(const std::filesystem::path& dir, bool force) {
  if (std::filesystem::exists(dir)) {
    if (!force) throw IoError("refusing to overwrite existing checkpoint " + dir.string());
    std::filesystem::remove_all(dir);
  }
  NamedTensors arrays;
  for (const auto& p : net_->named_parameters()) arrays.emplace_back(p.key(), p.value());
  for (const auto& b : net_->named_buffers()) arrays.emplace_back(b.key(), b.value());

  nlohmann::json steps = nlohmann::json::object();
  auto& state = optimizer_->state();
  for (const auto& p : net_->named_parameters()) {
    auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamWParamState&>(*it->second);
    steps[p.key()] = s.step();
    arrays.emplace_back("optim.exp_avg." + p.key(), s.exp_avg());
    arrays.emplace_back("optim.exp_avg_sq." + p.key(), s.exp_avg_sq());
  }

  nlohmann::json header{{"format", kCheckpointFormat},
                        {"config", cfg_.to_json()},
                        {"config_hash", cfg_.hash()},
                        {"backbone", net_->config().to_json()},
                        {"backbone_hash", net_->config().hash()},
                        {"prompt_set", nlohmann::json::parse(prompt_set_to_json(prompts_))},
                        {"prompt_hash", prompts_.hash()},
                        {"tau", tau_},
                        {"epoch", epoch()},
                        {"seed", cfg_.seed},
                        {"total_steps", total_steps()},
                        {"routes", routes_},
                        {"data_ids_hash", ids_hash(*data_)},
                        {"optimizer_steps", steps}};
  write_tensor_archive(dir, std::move(header), arrays);
}

namespace {

void load_parameters(torch::nn::Module& net, const TensorArchive& archive) {
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
    const auto* src = archive.find(name);
    if (!src) throw ConfigError("checkpoint is missing array " + name);
    if (src->sizes() != dst.sizes()) throw ConfigError("checkpoint shape mismatch for " + name);
    dst.copy_(*src);
  };
  for (auto& p : net.named_parameters()) copy_into(p.key(), p.value());
  for (auto& b : net.named_buffers()) copy_into(b.key(), b.value());
}

void check_format(const nlohmann::json& header) {
  if (header.value("format", 0) != kCheckpointFormat) throw ConfigError("unsupported checkpoint format");
}

}  // namespace

Trainer Trainer::resume(const std::filesystem::path& dir, std::shared_ptr<const PairSource> data) {
  const auto archive = read_tensor_archive(dir);
  const auto& h = archive.header;
  check_format(h);
  auto cfg = TrainConfig::from_json(h.at("config"));
  if (cfg.hash() != h.at("config_hash").get<std::string>()) throw ConfigError("checkpoint config hash mismatch");
  auto prompts = prompt_set_from_json(h.at("prompt_set").dump());
  if (!data) throw std::invalid_argument("resume needs the training dataset");
  if (ids_hash(*data) != h.at("data_ids_hash").get<std::string>()) {
    throw ConfigError("dataset differs from the one the checkpoint was trained on");
  }
  Trainer t(cfg, std::move(data), h.at("routes").get<std::vector<std::size_t>>(), std::move(prompts));
  if (t.net_->config().hash() != h.at("backbone_hash").get<std::string>()) {
    throw ConfigError("checkpoint backbone does not match its config");
  }
  load_parameters(*t.net_, archive);

  auto& state = t.optimizer_->state();
  const auto& steps = h.at("optimizer_steps");
  for (const auto& p : t.net_->named_parameters()) {
    if (!steps.contains(p.key())) continue;
    const auto* m = archive.find("optim.exp_avg." + p.key());
    const auto* v = archive.find("optim.exp_avg_sq." + p.key());
    if (!m || !v) throw ConfigError("checkpoint optimizer state incomplete for " + p.key());
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(steps.at(p.key()).get<std::int64_t>());
    s->exp_avg(m->clone());
    s->exp_avg_sq(v->clone());
    state[p.value().unsafeGetTensorImpl()] = std::move(s);
  }
  t.tau_ = h.at("tau").get<std::int64_t>();
  return t;
}

LoadedModel load_model(const std::filesystem::path& dir) {
  const auto archive = read_tensor_archive(dir);
  const auto& h = archive.header;
  check_format(h);
  LoadedModel m;
  m.config = TrainConfig::from_json(h.at("config"));
  m.prompts = prompt_set_from_json(h.at("prompt_set").dump());
  const auto bb = BackboneConfig::from_json(h.at("backbone"));
  if (bb.hash() != effective_backbone(m.config, m.prompts.size()).hash()) {
    throw ConfigError("checkpoint backbone does not match its config");
  }
  m.net = ClipRpnNet(bb);
  load_parameters(*m.net, archive);
  m.net->eval();
  m.tau = h.at("tau").get<std::int64_t>();
  m.epoch = h.at("epoch").get<std::int64_t>();
  return m;
}

MetricsReport evaluate(ClipRpnNet& net, const PairSource& data, const std::vector<std::size_t>& routes) {
  if (routes.size() != data.size()) throw std::invalid_argument("evaluate: one route per image is required");
  const bool was_training = net->is_training();
  net->eval();
  MetricsReport report;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = data.load(i);
    const auto r = net->config().use_mgca ? static_cast<std::int64_t>(routes[i]) : 0;
    const auto out = derain_padded(p.rainy, r, net);
    report.rows.push_back({data.id(i), psnr(out.derained, p.clean), ssim(out.derained, p.clean)});
  }
  net->train(was_training);
  return report;
}

}  // namespace cliprpn
