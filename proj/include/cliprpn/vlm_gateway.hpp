#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cliprpn/imaging.hpp"

namespace cliprpn {

inline constexpr std::size_t kEmbeddingDim = 512;

struct PromptSet {
  std::string name;
  std::vector<std::string> prompts;

  // n >= 2, every prompt non-empty, no duplicates.
  void validate() const;
  std::size_t size() const { return prompts.size(); }
  std::string hash() const;
};

// {"name": ..., "prompts": [...]}
PromptSet load_prompt_set(const std::filesystem::path& path);
PromptSet prompt_set_from_json(const std::string& json_text);
std::string prompt_set_to_json(const PromptSet& set);

enum class Modality { image, text };

struct Embedding {
  std::vector<float> vector;
  Modality modality = Modality::image;

  std::size_t dim() const { return vector.size(); }
};

class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;
  virtual std::string name() const = 0;
  virtual Embedding encode_image(const Image& img) const = 0;
  virtual std::vector<Embedding> encode_texts(const std::vector<std::string>& texts) const = 0;
};

// Offline encoder: a seeded projection of per-channel (mean - 0.5, variance) for images,
// and a keyed FNV-1a hash of the prompt text seeding a SplitMix64 stream for text.
class StubEncoder final : public EncoderBackend {
 public:
  static constexpr std::uint64_t kImageKey = 0x434c49502d525031ULL;
  static constexpr std::string_view kTextKey = "cliprpn-stub-text";

  std::string name() const override { return "stub"; }
  Embedding encode_image(const Image& img) const override;
  std::vector<Embedding> encode_texts(const std::vector<std::string>& texts) const override;
};

// Byte-level BPE tokenizer compatible with CLIP's SimpleTokenizer.
class ClipTokenizer {
 public:
  static constexpr std::size_t kContextLength = 77;

  // Reads the gzip'd merges file (bpe_simple_vocab_16e6.txt.gz).
  static ClipTokenizer from_file(const std::filesystem::path& bpe_path);
  // `merges` are "a b" lines without the header line.
  static ClipTokenizer from_merges(const std::vector<std::string>& merges);

  std::vector<std::int64_t> encode(const std::string& text) const;
  // [sot] + tokens + [eot], zero padded / truncated to the context length.
  std::vector<std::int64_t> tokenize(const std::string& text) const;

  std::int64_t sot() const { return sot_; }
  std::int64_t eot() const { return eot_; }
  std::size_t vocab_size() const { return encoder_.size(); }

 private:
  std::vector<std::string> bpe(const std::string& token) const;

  std::unordered_map<std::string, std::int64_t> encoder_;
  std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
  std::vector<std::string> byte_encoder_;
  struct BpeCache {
    std::mutex mutex;
    std::unordered_map<std::string, std::vector<std::string>> words;
  };
  std::shared_ptr<BpeCache> cache_ = std::make_shared<BpeCache>();
  std::int64_t sot_ = 0;
  std::int64_t eot_ = 0;
};

// CLIP ViT-B/32 exported as TorchScript: `<dir>/visual.pt`, `<dir>/textual.pt`,
// `<dir>/bpe_simple_vocab_16e6.txt.gz` (see tools/export_clip.py).
class TorchScriptClipEncoder final : public EncoderBackend {
 public:
  explicit TorchScriptClipEncoder(const std::filesystem::path& weights_dir);
  ~TorchScriptClipEncoder() override;

  std::string name() const override { return "real"; }
  Embedding encode_image(const Image& img) const override;
  std::vector<Embedding> encode_texts(const std::vector<std::string>& texts) const override;

  // Resize short side to 224 (bicubic), center crop, CLIP mean/std normalisation. [1, 3, 224, 224].
  static torch::Tensor preprocess(const Image& img);
  const ClipTokenizer& tokenizer() const;

 private:
  struct Modules;
  std::unique_ptr<Modules> modules_;
};

struct GatewayOptions {
  bool normalize = true;
  double temperature = 1.0;
};

// Numerically stable softmax (max subtraction).
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> match_logits(const Embedding& img, std::span<const Embedding> texts, const GatewayOptions& opts);
std::vector<double> match_scores(const Embedding& img, std::span<const Embedding> texts,
                                 const GatewayOptions& opts = {});

class VlmGateway {
 public:
  explicit VlmGateway(std::unique_ptr<EncoderBackend> backend, GatewayOptions opts = {});

  Embedding encode_image(const Image& img) const;
  // Order-preserving; repeated prompt texts are served from the cache.
  std::vector<Embedding> encode_prompts(const PromptSet& prompts);
  std::vector<double> match_scores(const Embedding& img, std::span<const Embedding> texts) const;

  const GatewayOptions& options() const { return opts_; }
  const EncoderBackend& backend() const { return *backend_; }
  std::size_t cache_size() const;

 private:
  std::unique_ptr<EncoderBackend> backend_;
  GatewayOptions opts_;
  std::unordered_map<std::string, Embedding> cache_;
  mutable std::mutex cache_mutex_;
};

struct GatewayConfig {
  std::string backend = "stub";  // "stub" | "real"
  std::string weights;           // directory for the real backend; falls back to CLIP_RPN_WEIGHTS
  GatewayOptions options;
};

std::unique_ptr<VlmGateway> make_gateway(const GatewayConfig& cfg);

}  // namespace cliprpn
