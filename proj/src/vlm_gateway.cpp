#include "cliprpn/vlm_gateway.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <torch/script.h>
#include <zlib.h>

#include "cliprpn/errors.hpp"
#include "cliprpn/hash.hpp"

namespace cliprpn {

// --- prompt sets ------------------------------------------------------------

void PromptSet::validate() const {
  if (prompts.size() < 2) throw ConfigError("prompt set '" + name + "' needs at least 2 prompts");
  std::set<std::string> seen;
  for (const auto& p : prompts) {
    if (p.empty()) throw ConfigError("prompt set '" + name + "' contains an empty prompt");
    if (!seen.insert(p).second) throw ConfigError("prompt set '" + name + "' repeats prompt: " + p);
  }
}

std::string PromptSet::hash() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : prompts) {
    h = fnv1a64(p, h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
  }
  return hex64(h);
}

PromptSet prompt_set_from_json(const std::string& json_text) {
  auto j = nlohmann::json::parse(json_text);
  PromptSet set;
  set.name = j.value("name", std::string("unnamed"));
  set.prompts = j.at("prompts").get<std::vector<std::string>>();
  set.validate();
  return set;
}

PromptSet load_prompt_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return prompt_set_from_json(ss.str());
}

std::string prompt_set_to_json(const PromptSet& set) {
  nlohmann::json j;
  j["name"] = set.name;
  j["prompts"] = set.prompts;
  return j.dump(2);
}

// --- stub encoder -------------------------------------------------------------

Embedding StubEncoder::encode_image(const Image& img) const {
  auto t = img.tensor().to(torch::kFloat64).reshape({3, -1});
  auto mean = t.mean(1);
  auto var = t.var(1, /*unbiased=*/false);
  std::array<double, 6> stats{};
  for (int c = 0; c < 3; ++c) {
    stats[c] = mean[c].item<double>() - 0.5;
    stats[3 + c] = var[c].item<double>();
  }
  SplitMix64 rng(kImageKey);
  Embedding e;
  e.modality = Modality::image;
  e.vector.resize(kEmbeddingDim);
  for (std::size_t j = 0; j < kEmbeddingDim; ++j) {
    double acc = 0.0;
    for (double s : stats) acc += rng.next_symmetric() * s;
    e.vector[j] = static_cast<float>(acc);
  }
  return e;
}

std::vector<Embedding> StubEncoder::encode_texts(const std::vector<std::string>& texts) const {
  std::vector<Embedding> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    SplitMix64 rng(fnv1a64(text, fnv1a64(kTextKey)));
    Embedding e;
    e.modality = Modality::text;
    e.vector.resize(kEmbeddingDim);
    for (auto& v : e.vector) v = static_cast<float>(rng.next_symmetric());
    out.push_back(std::move(e));
  }
  return out;
}

// --- tokenizer ----------------------------------------------------------------

namespace {

std::string utf8(std::uint32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

// (byte, codepoint) in the insertion order of CLIP's bytes_to_unicode().
std::vector<std::pair<int, std::uint32_t>> byte_unicode_table() {
  std::vector<int> bs;
  for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
  std::vector<std::pair<int, std::uint32_t>> table;
  for (int b : bs) table.emplace_back(b, static_cast<std::uint32_t>(b));
  std::uint32_t n = 0;
  for (int b = 0; b < 256; ++b) {
    if (std::find(bs.begin(), bs.end(), b) == bs.end()) table.emplace_back(b, 256 + n++);
  }
  return table;
}

std::vector<std::string> split_utf8(const std::string& s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

std::string read_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw WeightsUnavailable("cannot open BPE vocabulary: " + path.string());
  std::string out;
  std::array<char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), n);
  gzclose(f);
  return out;
}

enum class CharClass { letter, digit, space, other };

CharClass classify(unsigned char c) {
  // Non-ASCII sequences are treated as letters.
  if (c >= 0x80) return CharClass::letter;
  if (std::isalpha(c)) return CharClass::letter;
  if (std::isdigit(c)) return CharClass::digit;
  if (std::isspace(c)) return CharClass::space;
  return CharClass::other;
}

std::string clean_text(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  return out;
}

// Mirrors CLIP's split pattern: specials | contractions | letters+ | single digit | other+.
std::vector<std::string> pre_tokenize(const std::string& s) {
  static const std::array<std::string_view, 2> specials = {"<|startoftext|>", "<|endoftext|>"};
  static const std::array<std::string_view, 7> contractions = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto at = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    const std::string_view rest(s.data() + i, s.size() - i);
    bool matched = false;
    for (auto sp : specials) {
      if (rest.starts_with(sp)) {
        out.emplace_back(sp);
        i += sp.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    for (auto c : contractions) {
      if (rest.starts_with(c)) {
        out.emplace_back(c);
        i += c.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    const auto cls = classify(at(i));
    std::size_t j = i + 1;
    switch (cls) {
      case CharClass::space: i = j; continue;
      case CharClass::digit: break;
      case CharClass::letter:
      case CharClass::other:
        while (j < s.size() && classify(at(j)) == cls) ++j;
        break;
    }
    out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

ClipTokenizer ClipTokenizer::from_merges(const std::vector<std::string>& merges) {
  ClipTokenizer tok;
  const auto table = byte_unicode_table();
  tok.byte_encoder_.resize(256);
  std::vector<std::string> vocab;
  for (const auto& [b, cp] : table) {
    tok.byte_encoder_[b] = utf8(cp);
    vocab.push_back(utf8(cp));
  }
  const std::size_t base = vocab.size();
  for (std::size_t i = 0; i < base; ++i) vocab.push_back(vocab[i] + "</w>");
  for (std::size_t r = 0; r < merges.size(); ++r) {
    const auto sp = merges[r].find(' ');
    if (sp == std::string::npos) throw std::invalid_argument("malformed BPE merge: " + merges[r]);
    auto a = merges[r].substr(0, sp);
    auto b = merges[r].substr(sp + 1);
    tok.ranks_.emplace(std::make_pair(a, b), r);
    vocab.push_back(a + b);
  }
  vocab.emplace_back("<|startoftext|>");
  vocab.emplace_back("<|endoftext|>");
  for (std::size_t i = 0; i < vocab.size(); ++i) tok.encoder_[vocab[i]] = static_cast<std::int64_t>(i);
  tok.sot_ = tok.encoder_.at("<|startoftext|>");
  tok.eot_ = tok.encoder_.at("<|endoftext|>");
  return tok;
}

ClipTokenizer ClipTokenizer::from_file(const std::filesystem::path& bpe_path) {
  const auto text = read_gzip(bpe_path);
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  // Header line, then 49152 - 256 - 2 merges.
  constexpr std::size_t kMerges = 49152 - 256 - 2;
  if (lines.size() < kMerges + 1) throw WeightsUnavailable("BPE vocabulary truncated: " + bpe_path.string());
  return from_merges(std::vector<std::string>(lines.begin() + 1, lines.begin() + 1 + kMerges));
}

std::vector<std::string> ClipTokenizer::bpe(const std::string& token) const {
  {
    std::lock_guard lock(cache_->mutex);
    if (auto it = cache_->words.find(token); it != cache_->words.end()) return it->second;
  }
  auto word = split_utf8(token);
  if (word.empty()) return {};
  word.back() += "</w>";
  while (word.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::pair<std::string, std::string> best;
    for (std::size_t i = 0; i + 1 < word.size(); ++i) {
      auto it = ranks_.find({word[i], word[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = it->first;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    std::vector<std::string> merged;
    for (std::size_t i = 0; i < word.size();) {
      if (i + 1 < word.size() && word[i] == best.first && word[i + 1] == best.second) {
        merged.push_back(best.first + best.second);
        i += 2;
      } else {
        merged.push_back(word[i]);
        ++i;
      }
    }
    word = std::move(merged);
  }
  std::lock_guard lock(cache_->mutex);
  cache_->words.emplace(token, word);
  return word;
}

std::vector<std::int64_t> ClipTokenizer::encode(const std::string& text) const {
  std::vector<std::int64_t> ids;
  for (const auto& piece : pre_tokenize(clean_text(text))) {
    if (piece == "<|startoftext|>" || piece == "<|endoftext|>") {
      ids.push_back(encoder_.at(piece));
      continue;
    }
    std::string mapped;
    for (char c : piece) mapped += byte_encoder_[static_cast<unsigned char>(c)];
    for (const auto& sym : bpe(mapped)) ids.push_back(encoder_.at(sym));
  }
  return ids;
}

std::vector<std::int64_t> ClipTokenizer::tokenize(const std::string& text) const {
  std::vector<std::int64_t> ids{sot_};
  const auto body = encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(eot_);
  if (ids.size() > kContextLength) {
    ids.resize(kContextLength);
    ids.back() = eot_;
  }
  ids.resize(kContextLength, 0);
  return ids;
}

// --- TorchScript CLIP ---------------------------------------------------------

struct TorchScriptClipEncoder::Modules {
  torch::jit::script::Module visual;
  torch::jit::script::Module textual;
  ClipTokenizer tokenizer;
};

TorchScriptClipEncoder::TorchScriptClipEncoder(const std::filesystem::path& weights_dir) {
  const auto visual = weights_dir / "visual.pt";
  const auto textual = weights_dir / "textual.pt";
  const auto vocab = weights_dir / "bpe_simple_vocab_16e6.txt.gz";
  for (const auto& p : {visual, textual, vocab}) {
    if (!std::filesystem::exists(p)) throw WeightsUnavailable("missing CLIP weights file: " + p.string());
  }
  modules_ = std::make_unique<Modules>();
  try {
    modules_->visual = torch::jit::load(visual.string(), torch::kCPU);
    modules_->textual = torch::jit::load(textual.string(), torch::kCPU);
  } catch (const c10::Error& e) {
    throw WeightsUnavailable(std::string("cannot load TorchScript encoder: ") + e.what_without_backtrace());
  }
  modules_->visual.eval();
  modules_->textual.eval();
  modules_->tokenizer = ClipTokenizer::from_file(vocab);
}

TorchScriptClipEncoder::~TorchScriptClipEncoder() = default;

const ClipTokenizer& TorchScriptClipEncoder::tokenizer() const { return modules_->tokenizer; }

torch::Tensor TorchScriptClipEncoder::preprocess(const Image& img) {
  constexpr std::int64_t kSize = 224;
  const auto h = img.height();
  const auto w = img.width();
  std::int64_t nh = kSize, nw = kSize;
  if (h < w) {
    nw = static_cast<std::int64_t>(kSize * static_cast<double>(w) / static_cast<double>(h));
  } else {
    nh = static_cast<std::int64_t>(kSize * static_cast<double>(h) / static_cast<double>(w));
  }
  auto x = img.tensor().unsqueeze(0);
  if (nh != h || nw != w) {
    namespace F = torch::nn::functional;
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{nh, nw})
                              .mode(torch::kBicubic)
                              .align_corners(false)
                              .antialias(true))
            .clamp(0.0, 1.0);
  }
  const auto top = static_cast<std::int64_t>(std::lround((nh - kSize) / 2.0));
  const auto left = static_cast<std::int64_t>(std::lround((nw - kSize) / 2.0));
  x = x.narrow(2, top, kSize).narrow(3, left, kSize);
  const auto mean = torch::tensor({0.48145466, 0.4578275, 0.40821073}, torch::kFloat32).view({1, 3, 1, 1});
  const auto stdev = torch::tensor({0.26862954, 0.26130258, 0.27577711}, torch::kFloat32).view({1, 3, 1, 1});
  return ((x - mean) / stdev).contiguous();
}

namespace {

Embedding to_embedding(const torch::Tensor& row, Modality modality) {
  auto r = row.detach().to(torch::kFloat32).contiguous();
  if (r.numel() != static_cast<std::int64_t>(kEmbeddingDim)) {
    throw ShapeError("encoder returned " + std::to_string(r.numel()) + "-d embedding, expected 512");
  }
  Embedding e;
  e.modality = modality;
  e.vector.assign(r.data_ptr<float>(), r.data_ptr<float>() + r.numel());
  return e;
}

}  // namespace

Embedding TorchScriptClipEncoder::encode_image(const Image& img) const {
  torch::NoGradGuard no_grad;
  auto out = modules_->visual.forward({preprocess(img)}).toTensor();
  return to_embedding(out[0], Modality::image);
}

std::vector<Embedding> TorchScriptClipEncoder::encode_texts(const std::vector<std::string>& texts) const {
  torch::NoGradGuard no_grad;
  if (texts.empty()) return {};
  auto tokens = torch::empty({static_cast<std::int64_t>(texts.size()),
                              static_cast<std::int64_t>(ClipTokenizer::kContextLength)},
                             torch::kInt64);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto ids = modules_->tokenizer.tokenize(texts[i]);
    std::copy(ids.begin(), ids.end(), tokens[static_cast<std::int64_t>(i)].data_ptr<std::int64_t>());
  }
  auto out = modules_->textual.forward({tokens}).toTensor();
  std::vector<Embedding> result;
  for (std::int64_t i = 0; i < out.size(0); ++i) result.push_back(to_embedding(out[i], Modality::text));
  return result;
}

// --- scoring ------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

std::vector<double> match_logits(const Embedding& img, std::span<const Embedding> texts, const GatewayOptions& opts) {
  if (!(opts.temperature > 0.0)) throw ConfigError("temperature must be positive");
  auto norm = [](const Embedding& e) {
    double s = 0.0;
    for (float v : e.vector) s += static_cast<double>(v) * v;
    return std::max(std::sqrt(s), 1e-12);
  };
  const double img_norm = opts.normalize ? norm(img) : 1.0;
  std::vector<double> logits;
  logits.reserve(texts.size());
  for (const auto& t : texts) {
    if (t.dim() != img.dim()) throw ShapeError("embedding dimension mismatch");
    double dot = 0.0;
    for (std::size_t k = 0; k < t.dim(); ++k) dot += static_cast<double>(img.vector[k]) * t.vector[k];
    if (opts.normalize) dot /= img_norm * norm(t);
    logits.push_back(dot / opts.temperature);
  }
  return logits;
}

std::vector<double> match_scores(const Embedding& img, std::span<const Embedding> texts, const GatewayOptions& opts) {
  const auto logits = match_logits(img, texts, opts);
  return softmax(logits);
}

// --- gateway ------------------------------------------------------------------

VlmGateway::VlmGateway(std::unique_ptr<EncoderBackend> backend, GatewayOptions opts)
    : backend_(std::move(backend)), opts_(opts) {
  if (!backend_) throw std::invalid_argument("VlmGateway needs a backend");
}

Embedding VlmGateway::encode_image(const Image& img) const { return backend_->encode_image(img); }

std::vector<Embedding> VlmGateway::encode_prompts(const PromptSet& prompts) {
  std::vector<std::string> missing;
  {
    std::lock_guard lock(cache_mutex_);
    for (const auto& p : prompts.prompts) {
      if (!cache_.contains(p) && std::find(missing.begin(), missing.end(), p) == missing.end()) missing.push_back(p);
    }
  }
  if (!missing.empty()) {
    auto fresh = backend_->encode_texts(missing);
    std::lock_guard lock(cache_mutex_);
    for (std::size_t i = 0; i < missing.size(); ++i) cache_.insert_or_assign(missing[i], std::move(fresh[i]));
  }
  std::lock_guard lock(cache_mutex_);
  std::vector<Embedding> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts.prompts) out.push_back(cache_.at(p));
  return out;
}

std::vector<double> VlmGateway::match_scores(const Embedding& img, std::span<const Embedding> texts) const {
  return cliprpn::match_scores(img, texts, opts_);
}

std::size_t VlmGateway::cache_size() const {
  std::lock_guard lock(cache_mutex_);
  return cache_.size();
}

std::unique_ptr<VlmGateway> make_gateway(const GatewayConfig& cfg) {
  if (cfg.backend == "stub") return std::make_unique<VlmGateway>(std::make_unique<StubEncoder>(), cfg.options);
  if (cfg.backend == "real") {
    std::string dir = cfg.weights;
    if (dir.empty()) {
      if (const char* env = std::getenv("CLIP_RPN_WEIGHTS"); env != nullptr) dir = env;
    }
    if (dir.empty()) throw WeightsUnavailable("real backend needs --weights or CLIP_RPN_WEIGHTS");
    return std::make_unique<VlmGateway>(std::make_unique<TorchScriptClipEncoder>(dir), cfg.options);
  }
  throw ConfigError("unknown backend '" + cfg.backend + "' (expected real|stub)");
}

}  // namespace cliprpn
