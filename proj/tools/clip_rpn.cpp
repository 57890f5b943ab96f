// clip_rpn: train, evaluate and inspect the prompt-routed deraining model.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cliprpn/backbone.hpp"
#include "cliprpn/dataset.hpp"
#include "cliprpn/dls.hpp"
#include "cliprpn/errors.hpp"
#include "cliprpn/imaging.hpp"
#include "cliprpn/rpn.hpp"
#include "cliprpn/trainer.hpp"
#include "cliprpn/vlm_gateway.hpp"

namespace fs = std::filesystem;
using namespace cliprpn;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Bad or missing inputs detected before any side effect.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string data_root;
  std::string prompts;
  std::string backend = "stub";
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool data, bool prompts, bool backend) {
  if (data) cmd->add_option("--data-root", c.data_root, "Dataset root (defaults to $CLIP_RPN_DATA_ROOT)");
  if (prompts) cmd->add_option("--prompts", c.prompts, "Prompt-set JSON file");
  if (backend) {
    cmd->add_option("--backend", c.backend, "Vision-language encoder: real|stub")
        ->check(CLI::IsMember({"real", "stub"}));
  }
  cmd->add_option("--out", c.out, "Output path");
  cmd->add_flag("--force", c.force, "Overwrite existing outputs");
}

fs::path data_root(const Common& c) {
  if (!c.data_root.empty()) return c.data_root;
  if (auto env = default_data_root()) return *env;
  throw UsageError("no dataset: pass --data-root or set CLIP_RPN_DATA_ROOT");
}

fs::path prompts_path(const Common& c) {
  if (!c.prompts.empty()) return c.prompts;
  return fs::path(CLIPRPN_PROMPTS_DIR) / "p3.json";
}

PromptSet read_prompts(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("prompt file not found: " + path.string());
  try {
    return load_prompt_set(path);
  } catch (const std::invalid_argument& e) {
    throw UsageError(path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

void require_out(const Common& c) {
  if (c.out.empty()) throw UsageError("--out is required");
}

// Every output must be new, or --force given.
void check_writable(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw UsageError(p.string() + " exists; pass --force to overwrite");
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void require_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw UsageError("--checkpoint is required");
  require_file(fs::path(c.checkpoint) / "header.json", "checkpoint");
}

std::unique_ptr<VlmGateway> gateway(const Common& c) {
  GatewayConfig cfg;
  cfg.backend = c.backend;
  return make_gateway(cfg);
}

SourceTag tag_for(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  try {
    return source_tag_from_string(lower);
  } catch (const std::exception&) {
    return SourceTag::synthetic;
  }
}

// A root holding rain/ and norain/ is one dataset; otherwise each such subdirectory is.
std::vector<DatasetManifest> discover(const fs::path& root) {
  if (!fs::is_directory(root)) throw UsageError("dataset root not found: " + root.string());
  auto is_dataset = [](const fs::path& p) { return fs::is_directory(p / "rain") && fs::is_directory(p / "norain"); };
  std::vector<DatasetManifest> out;
  if (is_dataset(root)) {
    const auto name = fs::weakly_canonical(root).filename().string();
    out.push_back(DatasetManifest::from_directory(root, name, tag_for(name)));
    return out;
  }
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (is_dataset(e.path())) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    out.push_back(DatasetManifest::from_directory(d, d.filename().string(), tag_for(d.filename().string())));
  }
  if (out.empty()) throw UsageError("no rain/ + norain/ dataset under " + root.string());
  return out;
}

DatasetManifest single_manifest(const fs::path& root) {
  auto all = discover(root);
  if (all.size() == 1) return all.front();
  return build_mixed(all);
}

// Black to red, one channel per mask value.
Image heatmap(const torch::Tensor& mask, std::int64_t height, std::int64_t width) {
  auto m = mask.to(torch::kFloat32).clamp(0.0, 1.0).unsqueeze(0).unsqueeze(0);
  m = torch::nn::functional::interpolate(
          m, torch::nn::functional::InterpolateFuncOptions().size(std::vector<std::int64_t>{height, width}).mode(
                 torch::kNearest))
          .squeeze(0)
          .squeeze(0);
  auto z = torch::zeros_like(m);
  return Image(torch::stack({m, z, z}));
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// --- subcommands -----------------------------------------------------------------

int cmd_train(const Common& c) {
  require_out(c);
  check_writable(c.out, c.force);
  auto cfg = c.config.empty() ? TrainConfig{} : TrainConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  const auto manifest = single_manifest(data_root(c));
  if (manifest.empty()) throw UsageError("training dataset is empty");
  auto data = std::make_shared<ManifestSource>(manifest);

  std::optional<Trainer> trainer;
  if (!c.checkpoint.empty()) {
    require_checkpoint(c);
    trainer.emplace(Trainer::resume(c.checkpoint, data));
    std::cerr << "resuming at step " << trainer->tau() << "\n";
  } else {
    const auto prompts = read_prompts(prompts_path(c));
    std::vector<std::size_t> routes(data->size(), 0);
    if (cfg.rpn_on) routes = compute_routes(*data, prompts, *gateway(c));
    trainer.emplace(cfg, data, std::move(routes), prompts);
  }

  std::ostringstream steps, epochs;
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) { steps << s.to_json().dump() << '\n'; };
  hooks.on_epoch = [&](const EpochLog& e) {
    epochs << e.to_json().dump() << '\n';
    if (e.starved) std::cerr << "warning: epoch " << e.epoch << " left a sub-network without images\n";
    std::cerr << "epoch " << e.epoch << " total " << e.total << "\n";
  };
  trainer->train(hooks);

  const fs::path out = c.out;
  trainer->save(out, c.force);
  write_text(out / "steps.jsonl", steps.str());
  write_text(out / "epochs.jsonl", epochs.str());

  const auto report = evaluate(trainer->net(), *data, trainer->routes());
  std::cout << report.summary_json() << "\n";
  return 0;
}

int cmd_eval(const Common& c) {
  require_checkpoint(c);
  require_out(c);
  const fs::path out = c.out;
  check_writable(out / "metrics.csv", c.force);
  check_writable(out / "summary.json", c.force);
  auto model = load_model(c.checkpoint);
  auto prompts = model.prompts;
  if (!c.prompts.empty()) {
    const auto given = read_prompts(c.prompts);
    if (given.hash() != model.prompts.hash()) {
      if (!c.force) throw UsageError("prompt set differs from the checkpoint's; pass --force to override");
      std::cerr << "warning: evaluating with a prompt set the checkpoint was not trained on\n";
      if (given.size() != prompts.size() && model.config.rpn_on) {
        throw UsageError("prompt count does not match the checkpoint's sub-networks");
      }
      prompts = given;
    }
  }
  const auto manifest = single_manifest(data_root(c));
  ManifestSource data(manifest);
  std::vector<std::size_t> routes(data.size(), 0);
  if (model.config.rpn_on) routes = compute_routes(data, prompts, *gateway(c));
  const auto report = evaluate(model.net, data, routes);
  fs::create_directories(out);
  report.write(out / "metrics.csv", out / "summary.json");
  std::cout << report.summary_json() << "\n";
  return 0;
}

struct InferenceResult {
  Image input;
  DerainResult result;
};

InferenceResult infer(const Common& c, const fs::path& input) {
  auto model = load_model(c.checkpoint);
  InferenceResult r{load_image(input), {}};
  std::int64_t route_index = 0;
  if (model.config.rpn_on) {
    auto gw = gateway(c);
    route_index = static_cast<std::int64_t>(route(r.input, model.prompts, *gw).selected);
  }
  r.result = derain_padded(r.input, route_index, model.net);
  return r;
}

int cmd_derain(const Common& c, const std::string& input) {
  require_checkpoint(c);
  require_file(input, "input image");
  require_out(c);
  const fs::path out = c.out;
  const auto stem = fs::path(input).stem().string();
  std::vector<fs::path> targets{out / (stem + "_derained.png")};
  for (int l = 0; l < kMgcaLevels; ++l) targets.push_back(out / (stem + "_mask_l" + std::to_string(l) + ".png"));
  for (const auto& t : targets) check_writable(t, c.force);

  const auto r = infer(c, input);
  fs::create_directories(out);
  save_png(r.result.derained, targets[0]);
  for (std::size_t l = 0; l < r.result.masks.size(); ++l) {
    save_png(heatmap(r.result.masks[l].values, r.input.height(), r.input.width()), targets[l + 1]);
  }
  std::cout << targets[0].string() << "\n";
  return 0;
}

int cmd_viz_masks(const Common& c, const std::string& input) {
  require_checkpoint(c);
  require_file(input, "input image");
  require_out(c);
  const fs::path target = fs::path(c.out) / (fs::path(input).stem().string() + "_masks.png");
  check_writable(target, c.force);
  const auto r = infer(c, input);
  if (r.result.masks.empty()) throw UsageError("checkpoint was trained without mask prediction");
  // Input, derained output, then one heatmap per level, side by side.
  std::vector<torch::Tensor> panels{r.input.tensor(), r.result.derained.tensor()};
  for (const auto& m : r.result.masks) panels.push_back(heatmap(m.values, r.input.height(), r.input.width()).tensor());
  fs::create_directories(c.out);
  save_png(Image(torch::cat(panels, 2)), target);
  std::cout << target.string() << "\n";
  return 0;
}

int cmd_analyze(const Common& c) {
  const auto prompts = read_prompts(prompts_path(c));
  const auto manifests = discover(data_root(c));
  fs::path target;
  if (!c.out.empty()) {
    target = c.out;
    check_writable(target, c.force);
  }
  auto gw = gateway(c);
  const auto text = gw->encode_prompts(prompts);

  struct Row {
    std::string dataset;
    std::vector<std::int64_t> wins;
    std::int64_t total = 0;
  };
  std::vector<Row> rows;
  Row mixed{"mixed", std::vector<std::int64_t>(prompts.size(), 0), 0};
  for (const auto& m : manifests) {
    Row row{m.name(), std::vector<std::int64_t>(prompts.size(), 0), 0};
    for (const auto& e : m.entries()) {
      const auto d = route(gw->encode_image(load_image(e.rainy)), text, *gw);
      ++row.wins[d.selected];
      ++row.total;
      ++mixed.wins[d.selected];
      ++mixed.total;
    }
    rows.push_back(std::move(row));
  }
  if (manifests.size() > 1) rows.push_back(std::move(mixed));

  std::ostringstream csv;
  csv << "dataset,prompt_index,percent\n" << std::fixed << std::setprecision(4);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.wins.size(); ++i) {
      const double pct = row.total == 0 ? 0.0 : 100.0 * static_cast<double>(row.wins[i]) / row.total;
      csv << row.dataset << "," << i << "," << pct << "\n";
    }
  }
  if (target.empty()) {
    std::cout << csv.str();
  } else {
    write_text(target, csv.str());
  }
  return 0;
}

int cmd_synth(const Common& c, std::size_t count, std::int64_t size, const SynthRainParams& rain) {
  require_out(c);
  if (count == 0) throw UsageError("--count must be positive");
  if (size < 8) throw UsageError("--size must be at least 8");
  const fs::path out = c.out;
  check_writable(out / "rain", c.force);
  check_writable(out / "norain", c.force);
  const auto pairs = make_synthetic_pairs(count, size, size, rain, c.seed.value_or(0));
  fs::create_directories(out / "rain");
  fs::create_directories(out / "norain");
  for (const auto& p : pairs) {
    save_png(p.rainy, out / "rain" / (p.id + ".png"));
    save_png(p.clean, out / "norain" / (p.id + ".png"));
  }
  std::cout << pairs.size() << " pairs written to " << out.string() << "\n";
  return 0;
}

int cmd_loss_profile(const Common& c, std::int64_t total_steps, std::int64_t points, std::int64_t snapshots) {
  auto cfg = c.config.empty() ? TrainConfig{} : TrainConfig::load(c.config);
  if (total_steps < 1 || points < 2 || snapshots < 2) throw UsageError("need --steps >= 1, --points >= 2, --taus >= 2");
  fs::path target;
  if (!c.out.empty()) {
    target = c.out;
    check_writable(target, c.force);
  }
  LossSchedule schedule{cfg.beta, cfg.eta, total_steps, cfg.schedule_shape};
  schedule.validate();
  std::vector<double> grid;
  for (std::int64_t i = 0; i < points; ++i) {
    grid.push_back(0.01 + (1.0 - 0.01) * static_cast<double>(i) / static_cast<double>(points - 1));
  }
  std::ostringstream csv;
  csv << "tau,exponent,epsilon,loss,grad\n" << std::setprecision(10);
  for (std::int64_t k = 0; k < snapshots; ++k) {
    const auto tau = total_steps * k / (snapshots - 1);
    const auto p = schedule.exponent(tau);
    const auto grads = dls_gradient_profile(schedule, tau, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      csv << tau << "," << p << "," << grid[i] << "," << std::pow(grid[i], p) << "," << grads[i] << "\n";
    }
  }
  if (target.empty()) {
    std::cout << csv.str();
  } else {
    write_text(target, csv.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-routed, mask-guided single-image deraining"};
  app.require_subcommand(1);
  Common c;
  std::string input;

  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint directory");
  add_common(train, c, true, true, true);
  train->add_option("--config", c.config, "Training config JSON")->check(CLI::ExistingFile);
  train->add_option("--checkpoint", c.checkpoint, "Resume from this checkpoint");
  train->add_option("--seed", c.seed, "Override the config seed");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset (PSNR/SSIM on luma)");
  add_common(eval, c, true, true, true);
  eval->add_option("--checkpoint", c.checkpoint, "Checkpoint directory");

  auto* derain = app.add_subcommand("derain", "Derain one image and write its mask heatmaps");
  add_common(derain, c, false, false, true);
  derain->add_option("--checkpoint", c.checkpoint, "Checkpoint directory");
  derain->add_option("input", input, "Input image")->required();

  auto* viz = app.add_subcommand("viz-masks", "Side-by-side panel of input, output and per-level masks");
  add_common(viz, c, false, false, true);
  viz->add_option("--checkpoint", c.checkpoint, "Checkpoint directory");
  viz->add_option("input", input, "Input image")->required();

  auto* analyze = app.add_subcommand("analyze-prompts", "Per-dataset share of images won by each prompt");
  add_common(analyze, c, true, true, true);

  std::size_t count = 8;
  std::int64_t size = 64;
  SynthRainParams rain;
  auto* synth = app.add_subcommand("synth-data", "Generate procedural rainy/clean pairs");
  add_common(synth, c, false, false, false);
  synth->add_option("--seed", c.seed, "Generator seed");
  synth->add_option("--count", count, "Number of pairs");
  synth->add_option("--size", size, "Square image size");
  synth->add_option("--streaks", rain.streak_count, "Streaks per image");
  synth->add_option("--intensity", rain.intensity, "Additive streak intensity");

  std::int64_t steps = 1000, points = 100, taus = 5;
  auto* profile = app.add_subcommand("loss-profile", "Scheduled-loss gradient profiles as CSV");
  add_common(profile, c, false, false, false);
  profile->add_option("--config", c.config, "Training config JSON (beta, eta, schedule_shape)")
      ->check(CLI::ExistingFile);
  profile->add_option("--steps", steps, "Total optimizer steps T");
  profile->add_option("--points", points, "Epsilon grid size over [0.01, 1]");
  profile->add_option("--taus", taus, "Number of evenly spaced tau snapshots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(c);
    if (*eval) return cmd_eval(c);
    if (*derain) return cmd_derain(c, input);
    if (*viz) return cmd_viz_masks(c, input);
    if (*analyze) return cmd_analyze(c);
    if (*synth) return cmd_synth(c, count, size, rain);
    if (*profile) return cmd_loss_profile(c, steps, points, taus);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
