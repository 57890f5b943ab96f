#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cliprpn/backbone.hpp"
#include "cliprpn/dataset.hpp"
#include "cliprpn/dls.hpp"
#include "cliprpn/imaging.hpp"
#include "cliprpn/vlm_gateway.hpp"

namespace cliprpn {

struct TrainConfig {
  double lr = 2e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::int64_t batch_size = 8;
  std::int64_t epochs = 300;
  std::int64_t warmup_epochs = 15;
  std::int64_t crop = 128;
  double flip_p = 0.5;
  double grad_clip = 1.0;
  bool mixed_precision = false;
  bool rpn_on = true;
  bool mgca_on = true;
  LossKind loss = LossKind::dls;
  double beta = 0.8;
  double eta = 2.3;
  ScheduleShape schedule_shape = ScheduleShape::linear;
  std::uint64_t seed = 0;
  BackboneConfig backbone = BackboneConfig::desk();

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  std::string hash() const;
};

// Linear warmup from 0 to cfg.lr, then cosine annealing down to cfg.lr_min at cfg.epochs.
double lr_at(double epoch_fraction, const TrainConfig& cfg);

// Backbone actually trained: one sub-network per prompt (or a single one without routing),
// MGCA toggled by the ablation switch.
BackboneConfig effective_backbone(const TrainConfig& cfg, std::size_t n_prompts);

// Routes every rainy image once, at full resolution. Without routing everything maps to 0.
std::vector<std::size_t> compute_routes(const PairSource& data, const PromptSet& prompts, VlmGateway& gateway);

struct StepLog {
  std::int64_t step = 0;  // optimizer steps completed, after this one
  std::int64_t tau = 0;   // schedule position used by this step
  double exponent = 0.0;
  double total = 0.0;
  double recon = 0.0;
  std::array<double, 3> bce{};
  double lr = 0.0;
  double grad_norm = 0.0;

  nlohmann::json to_json() const;
};

struct EpochLog {
  std::int64_t epoch = 0;
  double total = 0.0;
  double recon = 0.0;
  std::array<double, 3> bce{};
  std::vector<std::int64_t> route_counts;
  bool starved = false;  // some sub-network saw no image this epoch
  std::optional<double> eval_psnr;
  std::optional<double> eval_ssim;

  nlohmann::json to_json() const;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(const EpochLog&)> on_epoch;
  const PairSource* eval_data = nullptr;
  std::vector<std::size_t> eval_routes;  // empty routes everything to sub-network 0
  std::int64_t eval_every = 0;  // epochs; 0 disables
};

class Trainer {
 public:
  // `routes[i]` is the sub-network for data item i.
  Trainer(TrainConfig cfg, std::shared_ptr<const PairSource> data, std::vector<std::size_t> routes,
          PromptSet prompts);

  // One optimizer step over the next (route-grouped) batch.
  StepLog step();
  // Runs the remaining steps of the current epoch.
  EpochLog run_epoch(const TrainHooks& hooks = {});
  // Runs until cfg.epochs are complete.
  std::vector<EpochLog> train(const TrainHooks& hooks = {});

  const TrainConfig& config() const { return cfg_; }
  const PromptSet& prompts() const { return prompts_; }
  const std::vector<std::size_t>& routes() const { return routes_; }
  const LossSchedule& schedule() const { return schedule_; }
  std::int64_t tau() const { return tau_; }
  std::int64_t epoch() const { return tau_ / steps_per_epoch_; }
  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const { return schedule_.total_steps; }
  bool finished() const { return tau_ >= total_steps(); }
  ClipRpnNet& net() { return net_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }

  // Data order of step `tau` (indices into the source).
  std::vector<std::size_t> batch_indices(std::int64_t tau) const;

  // Writes a checkpoint directory. Refuses to replace an existing one unless `force`.
  void save(const std::filesystem::path& dir, bool force = false);
  // Rebuilds the trainer from a checkpoint; `data` must be the dataset it was trained on.
  static Trainer resume(const std::filesystem::path& dir, std::shared_ptr<const PairSource> data);

 private:
  const ImagePair& pair(std::size_t i) const;

  TrainConfig cfg_;
  std::shared_ptr<const PairSource> data_;
  std::vector<std::size_t> routes_;
  PromptSet prompts_;
  LossSchedule schedule_;
  std::int64_t steps_per_epoch_ = 1;
  std::int64_t tau_ = 0;
  ClipRpnNet net_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::vector<std::string> param_names_;
  mutable std::vector<std::optional<ImagePair>> cache_;
};

// Model-only view of a checkpoint, for inference.
struct LoadedModel {
  TrainConfig config;
  PromptSet prompts;
  ClipRpnNet net{nullptr};
  std::int64_t tau = 0;
  std::int64_t epoch = 0;
};

LoadedModel load_model(const std::filesystem::path& dir);

// Full-image inference (reflect padded to a multiple of 8, cropped back) scored on luma.
MetricsReport evaluate(ClipRpnNet& net, const PairSource& data, const std::vector<std::size_t>& routes);

}  // namespace cliprpn
