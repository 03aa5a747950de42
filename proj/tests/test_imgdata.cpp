#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "solidmark/imgdata.hpp"

using namespace solidmark;
using namespace solidmark::imgdata;
namespace fs = std::filesystem;

namespace {

CaptionedDataset small(int count = 6, int size = 16, std::uint64_t seed = 7, int channels = 3) {
  SyntheticConfig c;
  c.count = count;
  c.base_size = size;
  c.num_classes = 3;
  c.seed = seed;
  c.channels = channels;
  return gen_synthetic_dataset(c);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("solidmark_imgdata_" + name);
  fs::remove_all(p);
  return p;
}

// The value every masked pixel of channel c holds; NaN if they differ.
double masked_value(const Image& img, const Mask& m, int c) {
  double v = std::nan("");
  bool first = true;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (m.at(y, x)) {
        if (first) v = img.at(c, y, x);
        else if (img.at(c, y, x) != v) return std::nan("");
        first = false;
      }
  return v;
}

}  // namespace

TEST(Synthetic, SameSeedGivesIdenticalDatasets) {
  SyntheticConfig c{1, 32, 2, 7, 3};
  EXPECT_EQ(gen_synthetic_dataset(c), gen_synthetic_dataset(c));
  c.seed = 8;
  SyntheticConfig d{1, 32, 2, 7, 3};
  EXPECT_NE(gen_synthetic_dataset(c).items[0].image, gen_synthetic_dataset(d).items[0].image);
}

TEST(Synthetic, ThreeHundredUniqueIds) {
  const auto ds = small(300, 32, 1);
  std::set<std::string> ids;
  for (const auto& it : ds.items) ids.insert(it.id);
  EXPECT_EQ(ids.size(), 300u);
}

TEST(Synthetic, ImagesAreNotMonochrome) {
  for (const auto& it : small(60, 32, 3).items) {
    std::set<double> values(it.image.pixels.begin(), it.image.pixels.end());
    EXPECT_GT(values.size(), 1u) << it.id;
    EXPECT_TRUE(it.image.in_unit_range());
  }
}

TEST(Synthetic, CaptionsAreClassNames) {
  const auto ds = small(6);
  for (const auto& it : ds.items) {
    EXPECT_EQ(it.caption, class_name(it.label));
    EXPECT_FALSE(it.caption.empty());
  }
}

TEST(Synthetic, RejectsBadConfig) {
  EXPECT_THROW(gen_synthetic_dataset({0, 32, 3, 1, 3}), ConfigError);
  EXPECT_THROW(gen_synthetic_dataset({1, 4, 3, 1, 3}), ConfigError);
  EXPECT_THROW(gen_synthetic_dataset({1, 32, 3, 1, 2}), ConfigError);
}

TEST(Keys, DeterministicPerSeedAndId) {
  EXPECT_EQ(draw_key(5, "a", ColorMode::grayscale), draw_key(5, "a", ColorMode::grayscale));
  const auto ds = small(4);
  EXPECT_EQ(assign_keys(ds, 9, ColorMode::grayscale), assign_keys(ds, 9, ColorMode::grayscale));
}

TEST(Keys, GridUniformMean) {
  double acc = 0;
  std::set<int> levels;
  for (int i = 0; i < 10000; ++i) {
    const Key k = draw_key(3, "id" + std::to_string(i), ColorMode::grayscale);
    ASSERT_TRUE(k.grid_snapped());
    acc += k.components[0];
    levels.insert(k.levels()[0]);
  }
  EXPECT_NEAR(acc / 10000, 0.5, 0.01);
  EXPECT_EQ(levels.size(), 256u);
}

TEST(Keys, RgbHasThreeComponents) {
  const Key k = draw_key(3, "x", ColorMode::rgb);
  ASSERT_EQ(k.size(), 3u);
  EXPECT_TRUE(k.grid_snapped());
}

TEST(Keys, DuplicateIdsRejected) {
  auto ds = small(2);
  ds.items[1].id = ds.items[0].id;
  EXPECT_THROW(assign_keys(ds, 1, ColorMode::grayscale), IntegrityError);
}

TEST(Pattern, BorderGrowsImageAndFillsFrame) {
  const auto ds = small(1, 32);
  const Key k = Key::from_levels({77});
  const PatternSpec spec;
  const Image aug = apply_pattern(ds.items[0].image, k, spec);
  ASSERT_EQ(aug.height, 40);
  ASSERT_EQ(aug.width, 40);
  const Mask m = build_pattern_mask(spec, 40, 40);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) {
        if (m.at(y, x)) EXPECT_EQ(aug.at(c, y, x), 77 / 255.0);
        else EXPECT_EQ(aug.at(c, y, x), ds.items[0].image.at(c, y - 4, x - 4));
      }
  EXPECT_EQ(masked_value(aug, m, 0), 77 / 255.0);
  EXPECT_EQ(strip_pattern(aug, spec), ds.items[0].image);
}

TEST(Pattern, ZeroKeyGivesZeroFrame) {
  const Image aug = apply_pattern(small(1, 16).items[0].image, Key::from_levels({0}), PatternSpec{});
  const Mask m = build_pattern_mask(PatternSpec{}, aug.height, aug.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < aug.height; ++y)
      for (int x = 0; x < aug.width; ++x)
        if (m.at(y, x)) EXPECT_EQ(aug.at(c, y, x), 0.0);
}

TEST(Pattern, CenterPatchKeepsDims) {
  PatternSpec spec{Placement::center, 16, ColorMode::grayscale};
  const Image base = small(1, 32).items[0].image;
  const Image aug = apply_pattern(base, Key::from_levels({200}), spec);
  EXPECT_TRUE(aug.same_dims(base));
  const Mask m = build_pattern_mask(spec, 32, 32);
  EXPECT_EQ(m.count(), 256u);
  EXPECT_EQ(masked_value(aug, m, 2), 200 / 255.0);
}

TEST(Pattern, RgbKeyPerChannel) {
  PatternSpec spec{Placement::border, 2, ColorMode::rgb};
  const Image aug = apply_pattern(small(1, 8).items[0].image, Key::from_levels({10, 20, 30}), spec);
  const Mask m = build_pattern_mask(spec, aug.height, aug.width);
  EXPECT_EQ(masked_value(aug, m, 0), 10 / 255.0);
  EXPECT_EQ(masked_value(aug, m, 1), 20 / 255.0);
  EXPECT_EQ(masked_value(aug, m, 2), 30 / 255.0);
}

TEST(Pattern, CenterPatchTooLargeIsDimensionError) {
  PatternSpec spec{Placement::center, 20, ColorMode::grayscale};
  EXPECT_THROW(apply_pattern(small(1, 16).items[0].image, Key::from_levels({1}), spec), DimensionError);
}

TEST(Pattern, OffGridKeyRejected) {
  Key k;
  k.components = {0.3333};
  EXPECT_ANY_THROW(apply_pattern(small(1, 8).items[0].image, k, PatternSpec{}));
}

TEST(Mask, BorderAreaAndComplement) {
  const Mask m = build_pattern_mask(PatternSpec{}, 40, 40);
  EXPECT_EQ(m.count(), 40u * 40u - 32u * 32u);
  for (auto v : m.values) EXPECT_EQ(v * (1 - v), 0);
}

TEST(Duplication, GrowsAndRecordsProvenance) {
  const auto aug = augment_dataset(small(5), PatternSpec{}, 3);
  const auto dup = inject_duplicates(aug, {aug.items[1].id}, {3}, true);
  EXPECT_EQ(dup.size(), aug.size() + 2);
  const auto ids = ids_with_provenance(dup, aug.items[1].id);
  EXPECT_EQ(ids.size(), 3u);
  std::set<std::string> unique(ids.begin(), ids.end());
  EXPECT_EQ(unique.size(), 3u);
  for (std::size_t i = 0; i < aug.size(); ++i) EXPECT_EQ(dup.items[i], aug.items[i]);
  // each copy carries its own key in its border
  const Mask m = build_pattern_mask(PatternSpec{}, 24, 24);
  for (const auto& id : ids)
    EXPECT_EQ(masked_value(dup.find(id).image, m, 0), dup.keymap->at(id).components[0]);
}

TEST(Duplication, SharedKeysAreIdentical) {
  const auto aug = augment_dataset(small(3), PatternSpec{}, 3);
  const auto dup = inject_duplicates(aug, {aug.items[0].id}, {4}, false);
  for (const auto& id : ids_with_provenance(dup, aug.items[0].id)) {
    EXPECT_EQ(dup.keymap->at(id), aug.keymap->at(aug.items[0].id));
    EXPECT_EQ(dup.find(id).image, aug.items[0].image);
  }
}

TEST(Duplication, UnknownIdIsLookupError) {
  const auto aug = augment_dataset(small(2), PatternSpec{}, 3);
  EXPECT_THROW(inject_duplicates(aug, {"nope"}, {2}, true), LookupError);
  EXPECT_THROW(inject_duplicates(aug, {aug.items[0].id}, {1}, true), ConfigError);
}

TEST(QueryTransforms, LevelZeroIsIdentity) {
  const Image img = small(1).items[0].image;
  EXPECT_EQ(augment_query(img, parse_transform("crop0"), 1), img);
  EXPECT_EQ(augment_query(img, parse_transform("blur0"), 1), img);
  EXPECT_EQ(augment_query(img, parse_transform("identity"), 1), img);
}

TEST(QueryTransforms, Rotate180TwiceRestores) {
  const Image img = small(1, 17).items[0].image;
  const auto t = parse_transform("rotate180");
  const Image back = augment_query(augment_query(img, t, 1), t, 2);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1.0 / 255);
}

TEST(QueryTransforms, CropWindowSize) {
  Rng rng = derive_rng(1, "t");
  const auto w = crop_window(40, 40, 2, rng);
  EXPECT_NEAR(w.height, 0.6 * 40, 1e-9);
  EXPECT_NEAR(w.width, 0.6 * 40, 1e-9);
}

TEST(QueryTransforms, BlurKernelSide) {
  EXPECT_EQ(blur_kernel_side(1), 5);
  EXPECT_EQ(blur_kernel_side(4), 17);
}

TEST(QueryTransforms, RejectsOutOfRange) {
  EXPECT_THROW(parse_transform("crop5"), ConfigError);
  EXPECT_THROW(parse_transform("rotate3"), ConfigError);
  EXPECT_THROW(parse_transform("shear1"), ConfigError);
}

TEST(QueryTransforms, PatternRegionSurvivesAugmentation) {
  const auto aug = augment_dataset(small(2), PatternSpec{}, 4);
  const Mask m = build_pattern_mask(PatternSpec{}, 24, 24);
  for (const char* name : {"crop3", "blur2", "rotate-1", "rotate180"}) {
    const auto& it = aug.items[1];
    const Key& k = aug.keymap->at(it.id);
    const Image out = augment_augmented(it.image, k, PatternSpec{}, parse_transform(name), 9);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
          if (m.at(y, x)) ASSERT_EQ(out.at(c, y, x), k.components[0]) << name;
  }
}

TEST(Storage, RoundTripIsBitExact) {
  const auto dir = temp_dir("roundtrip");
  auto ds = augment_dataset(small(4, 8, 2), PatternSpec{Placement::border, 2, ColorMode::grayscale}, 5);
  ds = inject_duplicates(ds, {ds.items[0].id}, {2}, true);
  save_dataset(ds, dir);
  EXPECT_EQ(load_dataset(dir), ds);
  const std::string manifest = read_text(dir / "manifest.jsonl");
  EXPECT_NE(manifest.find("\"provenance\":\"" + ds.items[0].id + "\""), std::string::npos);
}

TEST(Storage, GrayscaleRoundTrip) {
  const auto dir = temp_dir("gray");
  const auto ds = augment_dataset(small(2, 8, 2, 1), PatternSpec{}, 5);
  save_dataset(ds, dir);
  EXPECT_EQ(load_dataset(dir), ds);
}

TEST(Storage, MissingKeymapIsExplicit) {
  const auto dir = temp_dir("nokeymap");
  save_dataset(augment_dataset(small(2, 8), PatternSpec{}, 5), dir);
  fs::remove(dir / "keymap.json");
  try {
    load_dataset(dir);
    FAIL() << "expected KeymapAbsentError";
  } catch (const KeymapAbsentError& e) {
    EXPECT_NE(std::string(e.what()).find("keymap absent"), std::string::npos);
  }
}

TEST(Storage, CorruptManifestNamesRecord) {
  const auto dir = temp_dir("corrupt");
  save_dataset(small(2, 8), dir);
  {
    std::ofstream f(dir / "manifest.jsonl", std::ios::app);
    f << "{\"id\": broken\n";
  }
  try {
    load_dataset(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos) << e.what();
  }
}
