#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "cliprpn/dataset.hpp"
#include "cliprpn/errors.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cliprpn;

namespace {

ImagePair flat_pair(float rainy, float clean, std::int64_t h = 4, std::int64_t w = 4) {
  return {Image::filled(h, w, rainy, rainy, rainy), Image::filled(h, w, clean, clean, clean), "p"};
}

}  // namespace

TEST(GtMask, StrictThresholdExcludesExactlyPointOne) {
  auto m = gt_mask(flat_pair(0.1f, 0.0f));
  EXPECT_EQ(m.values.sum().item<float>(), 0.0f);
  auto above = gt_mask(flat_pair(std::nextafter(0.1f, 1.0f), 0.0f));
  EXPECT_EQ(above.values.sum().item<float>(), 16.0f);
}

TEST(GtMask, UsesChannelMeanOfAbsoluteDifference) {
  // |diff| = (0.4, 0, 0) averages to 0.133, above the threshold.
  ImagePair p{Image::filled(1, 2, 0.0f, 0.5f, 0.5f), Image::filled(1, 2, 0.4f, 0.5f, 0.5f), "p"};
  EXPECT_EQ(gt_mask(p).values.sum().item<float>(), 2.0f);
  ImagePair q{Image::filled(1, 1, 0.2f, 0.5f, 0.5f), Image::filled(1, 1, 0.6f, 0.2f, 0.5f), "q"};
  // (0.4 + 0.3 + 0) / 3 > 0.1
  EXPECT_EQ(gt_mask(q).values.item<float>(), 1.0f);
}

TEST(GtMask, IsBinaryAndValidates) {
  auto pairs = make_synthetic_pairs(2, 24, 24, {}, 1);
  auto m = gt_mask(pairs[0]);
  EXPECT_NO_THROW(m.validate());
  EXPECT_EQ(m.kind, MaskKind::binary_gt);
  EXPECT_TRUE(((m.values == 0) | (m.values == 1)).all().item<bool>());
  EXPECT_GT(m.values.sum().item<float>(), 0.0f);
}

TEST(GtMask, TensorFormMatchesImageForm) {
  auto pairs = make_synthetic_pairs(3, 16, 16, {}, 2);
  std::vector<torch::Tensor> r, c;
  for (const auto& p : pairs) {
    r.push_back(p.rainy.tensor());
    c.push_back(p.clean.tensor());
  }
  auto batch = gt_mask_tensor(torch::stack(r), torch::stack(c));
  ASSERT_EQ(batch.sizes(), (std::vector<std::int64_t>{3, 1, 16, 16}));
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(torch::equal(batch[i][0], gt_mask(pairs[i]).values));
}

TEST(GtMask, ValidateRejectsNonBinary) {
  RainMask m{torch::full({2, 2}, 0.5f), MaskKind::binary_gt, 0};
  EXPECT_THROW(m.validate(), std::invalid_argument);
  RainMask p{torch::full({2, 2}, 1.0f), MaskKind::predicted, 0};
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Downsample, MatchesMaxPoolOracle) {
  torch::Generator gen = at::detail::createCPUGenerator(5);
  auto values = (torch::rand({16, 12}, gen) > 0.8).to(torch::kFloat32);
  RainMask m{values, MaskKind::binary_gt, 0};
  for (int f : {1, 2, 4}) {
    auto ours = downsample_mask(m, f);
    oracle::Plane plane(16, std::vector<double>(12));
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 12; ++x) plane[y][x] = values[y][x].item<float>();
    }
    auto ref = oracle::maxpool(plane, f);
    ASSERT_EQ(ours.height(), static_cast<std::int64_t>(ref.size()));
    for (std::size_t y = 0; y < ref.size(); ++y) {
      for (std::size_t x = 0; x < ref[y].size(); ++x) EXPECT_EQ(ours.values[y][x].item<float>(), ref[y][x]);
    }
  }
}

TEST(Downsample, TracksLevelAndRejectsIndivisible) {
  RainMask m{torch::zeros({8, 8}), MaskKind::binary_gt, 0};
  EXPECT_EQ(downsample_mask(m, 4).level, 2);
  EXPECT_THROW(downsample_mask(RainMask{torch::zeros({6, 8}), MaskKind::binary_gt, 0}, 4), ShapeError);
}

// The rain mask of an augmented pair equals the augmented mask of the pair.
TEST(GtMask, CommutesWithAugmentation) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 50; ++i) {
    const auto h = 16 + static_cast<std::int64_t>(rng() % 17), w = 16 + static_cast<std::int64_t>(rng() % 17);
    ImagePair p = synth_rain(procedural_scene(h, w, rng()), SynthRainParams{20, 8.0, 6, 0.4, rng()});
    const auto window = draw_crop_window(h, w, 16, rng);
    const auto flips = draw_flips(0.5, rng);
    auto aug = flip_pair(crop_pair(p, window), flips);
    auto lhs = gt_mask(aug).values;
    auto rhs = flip_hw(crop_hw(gt_mask(p).values, window), flips);
    EXPECT_TRUE(torch::equal(lhs, rhs)) << "fixture " << i;
  }
}

TEST(SynthRain, DeterministicAndAdditive) {
  auto scene = procedural_scene(32, 32, 3);
  SynthRainParams params;
  params.seed = 9;
  auto a = synth_rain(scene, params);
  auto b = synth_rain(scene, params);
  EXPECT_TRUE(torch::equal(a.rainy.tensor(), b.rainy.tensor()));
  EXPECT_TRUE(torch::equal(a.clean.tensor(), scene.tensor()));
  EXPECT_TRUE((a.rainy.tensor() >= a.clean.tensor()).all().item<bool>());
  EXPECT_FALSE(torch::equal(a.rainy.tensor(), a.clean.tensor()));
  params.seed = 10;
  EXPECT_FALSE(torch::equal(synth_rain(scene, params).rainy.tensor(), a.rainy.tensor()));
}

TEST(SynthRain, SceneStaysBelowSaturation) {
  auto s = procedural_scene(20, 28, 1);
  EXPECT_EQ(s.height(), 20);
  EXPECT_EQ(s.width(), 28);
  EXPECT_LE(s.tensor().max().item<float>(), 0.8f);
  EXPECT_GE(s.tensor().min().item<float>(), 0.02f);
}

TEST(SynthRain, PairIds) {
  auto pairs = make_synthetic_pairs(3, 16, 16, {}, 0);
  ASSERT_EQ(pairs.size(), 3u);
  EXPECT_EQ(pairs[0].id, "0000");
  EXPECT_EQ(pairs[2].id, "0002");
}

namespace {

void write_dataset(const std::filesystem::path& root, int n, int seed) {
  std::filesystem::create_directories(root / "rain");
  std::filesystem::create_directories(root / "norain");
  auto pairs = make_synthetic_pairs(n, 16, 16, {}, seed);
  for (const auto& p : pairs) {
    save_png(p.rainy, root / "rain" / (p.id + ".png"));
    save_png(p.clean, root / "norain" / (p.id + ".png"));
  }
}

}  // namespace

TEST(Manifest, FromDirectoryPairsByStem) {
  test_util::TempDir dir;
  write_dataset(dir.path(), 3, 1);
  auto m = DatasetManifest::from_directory(dir.path(), "toy", SourceTag::synthetic);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.entries()[1].id, "0001");
  auto pair = load_pair(m.entries()[0]);
  EXPECT_EQ(pair.rainy.height(), 16);
  EXPECT_EQ(pair.id, "0000");
}

TEST(Manifest, MissingCounterpartThrows) {
  test_util::TempDir dir;
  write_dataset(dir.path(), 2, 1);
  std::filesystem::remove(dir.path() / "norain" / "0001.png");
  EXPECT_THROW(DatasetManifest::from_directory(dir.path(), "x", SourceTag::synthetic), IoError);
}

TEST(Manifest, RejectsDuplicateIdsAndMissingFiles) {
  ManifestEntry e{"a", "/nope/r.png", "/nope/c.png"};
  EXPECT_THROW(DatasetManifest("x", SourceTag::synthetic, {e}), std::exception);
  EXPECT_THROW(DatasetManifest("x", SourceTag::synthetic, {e, e}, false), std::invalid_argument);
  EXPECT_NO_THROW(DatasetManifest("x", SourceTag::synthetic, {e}, false));
}

TEST(Manifest, JsonlRoundTrip) {
  test_util::TempDir dir;
  write_dataset(dir.path() / "d", 2, 3);
  auto m = DatasetManifest::from_directory(dir.path() / "d", "d", SourceTag::rain100l);
  m.write_jsonl(dir.path() / "m.jsonl");
  auto back = DatasetManifest::load_jsonl(dir.path() / "m.jsonl", "d", SourceTag::rain100l);
  EXPECT_EQ(back.entries(), m.entries());
}

TEST(Manifest, MixedPrefixesIds) {
  test_util::TempDir dir;
  write_dataset(dir.path() / "a", 2, 1);
  write_dataset(dir.path() / "b", 1, 2);
  std::vector<DatasetManifest> parts{DatasetManifest::from_directory(dir.path() / "a", "a", SourceTag::rain100l),
                                     DatasetManifest::from_directory(dir.path() / "b", "b", SourceTag::rain100h)};
  auto mixed = build_mixed(parts);
  ASSERT_EQ(mixed.size(), 3u);
  EXPECT_EQ(mixed.source_tag(), SourceTag::mixed);
  EXPECT_EQ(mixed.entries()[0].id, "a/0000");
  EXPECT_EQ(mixed.entries()[2].id, "b/0000");
}

TEST(SourceTag, StringRoundTrip) {
  for (auto t : {SourceTag::rain100l, SourceTag::rain100h, SourceTag::rain800, SourceTag::mixed, SourceTag::synthetic}) {
    EXPECT_EQ(source_tag_from_string(to_string(t)), t);
  }
  EXPECT_THROW(source_tag_from_string("rain9000"), std::invalid_argument);
}

TEST(Sources, MemoryAndManifestAgree) {
  test_util::TempDir dir;
  write_dataset(dir.path(), 2, 4);
  ManifestSource ms(DatasetManifest::from_directory(dir.path(), "d", SourceTag::synthetic));
  EXPECT_EQ(ms.size(), 2u);
  EXPECT_EQ(ms.id(1), "0001");
  MemorySource mem(make_synthetic_pairs(2, 16, 16, {}, 4));
  EXPECT_EQ(mem.id(0), "0000");
  EXPECT_EQ(quantize_8bit(mem.load(0).rainy).tensor().sub(ms.load(0).rainy.tensor()).abs().max().item<float>(), 0.0f);
}

TEST(DataRoot, ReadsEnvironment) {
  setenv("CLIP_RPN_DATA_ROOT", "/tmp/some_root", 1);
  ASSERT_TRUE(default_data_root().has_value());
  EXPECT_EQ(default_data_root()->string(), "/tmp/some_root");
  unsetenv("CLIP_RPN_DATA_ROOT");
  EXPECT_FALSE(default_data_root().has_value());
}
