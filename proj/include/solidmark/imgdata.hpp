#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "solidmark/error.hpp"
#include "solidmark/image.hpp"
#include "solidmark/random.hpp"

namespace solidmark::imgdata {

using json = nlohmann::json;

struct Keymap {
  std::map<std::string, Key> entries;
  std::uint64_t seed = 0;
  ColorMode color_mode = ColorMode::grayscale;

  bool contains(const std::string& id) const { return entries.count(id) != 0; }

  const Key& at(const std::string& id) const {
    auto it = entries.find(id);
    if (it == entries.end()) throw IntegrityError("keymap has no key for image '" + id + "'");
    return it->second;
  }

  friend bool operator==(const Keymap&, const Keymap&) = default;
};

struct DatasetItem {
  std::string id;
  Image image;
  std::string caption;
  int label = 0;
  std::string provenance;  // original id for injected duplicates, else empty

  friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

struct DuplicationRecord {
  std::string id;
  int count = 0;
  bool independent_keys = true;

  friend bool operator==(const DuplicationRecord&, const DuplicationRecord&) = default;
};

// A dataset is immutable in practice: every operation below returns a new one.
// When `pattern` is set the item images are pattern-augmented and `keymap`
// holds the key of every item.
struct CaptionedDataset {
  std::vector<DatasetItem> items;
  std::optional<Keymap> keymap;
  std::optional<PatternSpec> pattern;
  std::uint64_t seed = 0;
  std::vector<DuplicationRecord> duplications;

  std::size_t size() const { return items.size(); }

  const DatasetItem& find(const std::string& id) const {
    for (const auto& it : items)
      if (it.id == id) return it;
    throw LookupError("unknown image id '" + id + "'");
  }

  friend bool operator==(const CaptionedDataset&, const CaptionedDataset&) = default;
};

inline void require_unique_ids(const CaptionedDataset& ds) {
  std::set<std::string> seen;
  for (const auto& it : ds.items) {
    if (!seen.insert(it.id).second)
      throw IntegrityError("duplicate image id '" + it.id + "' in dataset");
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  int count = 300;
  int base_size = 32;
  int num_classes = 3;
  std::uint64_t seed = 0;
  int channels = 3;
};

inline std::string class_name(int label) {
  static const char* kNames[] = {"disc", "square", "stripes", "ring", "triangle", "checker"};
  if (label >= 0 && label < 6) return kNames[label];
  return "class_" + std::to_string(label);
}

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

namespace detail {

struct Rgb {
  double v[3];
};

inline Rgb random_color(Rng& rng) { return {{uniform01(rng), uniform01(rng), uniform01(rng)}}; }

// Coverage in [0,1] of a shape at pixel centre (px, py) in unit coordinates.
inline double shape_coverage(int shape, double px, double py, double cx, double cy, double r,
                             double angle, double freq) {
  const double dx = px - cx, dy = py - cy;
  switch (shape) {
    case 0: return std::hypot(dx, dy) <= r ? 1.0 : 0.0;
    case 1: return (std::abs(dx) <= r && std::abs(dy) <= r) ? 1.0 : 0.0;
    case 2: {
      const double u = std::cos(angle) * px + std::sin(angle) * py;
      return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * u);
    }
    case 3: {
      const double d = std::hypot(dx, dy);
      return (d <= r && d >= 0.55 * r) ? 1.0 : 0.0;
    }
    case 4: {
      // upward triangle with apex at (cx, cy - r)
      if (dy < -r || dy > r) return 0.0;
      const double half = (dy + r) * 0.5;
      return std::abs(dx) <= half ? 1.0 : 0.0;
    }
    default: {
      const int a = static_cast<int>(std::floor(px * freq));
      const int b = static_cast<int>(std::floor(py * freq));
      return ((a + b) & 1) ? 1.0 : 0.0;
    }
  }
}

}  // namespace detail

// Procedurally drawn images: a two-colour gradient background, a class-specific
// shape or texture, and a couple of small random dots. Pixel values are
// quantized to the 8-bit grid so the dataset survives a save/load round trip.
inline CaptionedDataset gen_synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.count < 1) throw ConfigError("synthetic dataset count must be >= 1");
  if (cfg.base_size < 8) throw ConfigError("synthetic dataset base_size must be >= 8");
  if (cfg.num_classes < 1) throw ConfigError("synthetic dataset num_classes must be >= 1");
  if (cfg.channels != 1 && cfg.channels != 3)
    throw ConfigError("synthetic dataset channels must be 1 or 3");

  CaptionedDataset ds;
  ds.seed = cfg.seed;
  const int n = cfg.base_size;
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng = derive_rng(cfg.seed, "synthetic", {static_cast<std::uint64_t>(i)});
    const int label = i % cfg.num_classes;
    const int shape = label % 6;

    const detail::Rgb bg0 = detail::random_color(rng), bg1 = detail::random_color(rng);
    const detail::Rgb fg = detail::random_color(rng);
    const double grad_angle = uniform01(rng) * 2.0 * std::numbers::pi;
    const double cx = 0.3 + 0.4 * uniform01(rng), cy = 0.3 + 0.4 * uniform01(rng);
    const double r = 0.15 + 0.15 * uniform01(rng);
    const double angle = uniform01(rng) * std::numbers::pi;
    const double freq = 2.0 + 3.0 * uniform01(rng);
    const double texture_amp = 0.06 * uniform01(rng);
    struct Dot {
      double x, y, rad;
      detail::Rgb col;
    };
    std::vector<Dot> dots;
    for (int d = 0; d < 2; ++d) {
      Dot dot{uniform01(rng), uniform01(rng), 0.04 + 0.04 * uniform01(rng), {}};
      dot.col = detail::random_color(rng);
      dots.push_back(dot);
    }

    Image img(n, n, cfg.channels);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double px = (x + 0.5) / n, py = (y + 0.5) / n;
        const double g = 0.5 + 0.5 * ((px - 0.5) * std::cos(grad_angle) +
                                      (py - 0.5) * std::sin(grad_angle));
        const double cov = detail::shape_coverage(shape, px, py, cx, cy, r, angle, freq);
        const double tex = texture_amp * (uniform01(rng) - 0.5);
        double dotw = 0.0;
        const Dot* hit = nullptr;
        for (const auto& dot : dots) {
          if (std::hypot(px - dot.x, py - dot.y) <= dot.rad) {
            dotw = 1.0;
            hit = &dot;
          }
        }
        for (int c = 0; c < cfg.channels; ++c) {
          const int src = cfg.channels == 1 ? 1 : c;
          double v = bg0.v[src] * (1.0 - g) + bg1.v[src] * g;
          v = v * (1.0 - cov) + fg.v[src] * cov + tex;
          if (hit) v = v * (1.0 - dotw) + hit->col.v[src] * dotw;
          img.at(c, y, x) = quantize8(v);
        }
      }
    }

    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "img%06d", i);
    ds.items.push_back({idbuf, std::move(img), class_name(label), label, ""});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Keys and patterns

inline Key draw_key(std::uint64_t seed, const std::string& id, ColorMode mode) {
  Rng rng = derive_rng(seed, "key:" + id);
  std::vector<int> levels;
  const int comps = mode == ColorMode::rgb ? 3 : 1;
  for (int c = 0; c < comps; ++c) levels.push_back(uniform_int(rng, 0, 255));
  return Key::from_levels(levels);
}

// Keys are i.i.d. uniform over {0, 1/255, ..., 1} and depend only on
// (seed, id), so adding items never changes existing keys.
inline Keymap assign_keys(const CaptionedDataset& ds, std::uint64_t seed, ColorMode mode) {
  require_unique_ids(ds);
  Keymap km;
  km.seed = seed;
  km.color_mode = mode;
  for (const auto& it : ds.items) km.entries.emplace(it.id, draw_key(seed, it.id, mode));
  return km;
}

inline void check_key_for(const Key& key, const PatternSpec& spec) {
  const std::size_t want = spec.color_mode == ColorMode::rgb ? 3 : 1;
  if (key.size() != want)
    throw ConfigError("key has " + std::to_string(key.size()) + " components, pattern expects " +
                      std::to_string(want));
  if (!key.grid_snapped()) throw ConfigError("pattern key is not snapped to the 256-level grid");
}

inline Image apply_pattern(const Image& image, const Key& key, const PatternSpec& spec) {
  spec.validate_for(image.height, image.width);
  check_key_for(key, spec);
  if (spec.color_mode == ColorMode::rgb && image.channels != 3)
    throw DimensionError("rgb pattern requires a 3-channel image");

  if (spec.placement == Placement::border) {
    const int p = spec.thickness;
    Image out(image.height + 2 * p, image.width + 2 * p, image.channels);
    for (int c = 0; c < image.channels; ++c) {
      const double k = key.channel_value(c);
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) out.at(c, y, x) = k;
      for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) out.at(c, y + p, x + p) = image.at(c, y, x);
    }
    return out;
  }

  Image out = image;
  const int s = spec.thickness;
  const int y0 = (image.height - s) / 2, x0 = (image.width - s) / 2;
  for (int c = 0; c < image.channels; ++c) {
    const double k = key.channel_value(c);
    for (int y = y0; y < y0 + s; ++y)
      for (int x = x0; x < x0 + s; ++x) out.at(c, y, x) = k;
  }
  return out;
}

// Per-pixel mask over the augmented dims; sum equals the pattern area (not
// multiplied by the channel count).
inline Mask build_pattern_mask(const PatternSpec& spec, int aug_height, int aug_width) {
  if (spec.thickness < 1) throw ConfigError("pattern thickness must be >= 1");
  if (spec.placement == Placement::border) {
    const int p = spec.thickness;
    if (aug_height <= 2 * p || aug_width <= 2 * p)
      throw DimensionError("augmented dims too small for border thickness " + std::to_string(p));
    Mask m(aug_height, aug_width, 1);
    for (int y = p; y < aug_height - p; ++y)
      for (int x = p; x < aug_width - p; ++x) m.at(y, x) = 0;
    return m;
  }
  const int s = spec.thickness;
  if (s > aug_height || s > aug_width)
    throw DimensionError("center patch does not fit inside the image");
  Mask m(aug_height, aug_width, 0);
  const int y0 = (aug_height - s) / 2, x0 = (aug_width - s) / 2;
  for (int y = y0; y < y0 + s; ++y)
    for (int x = x0; x < x0 + s; ++x) m.at(y, x) = 1;
  return m;
}

// Returns the query interior of an augmented image. For center patterns the
// dims are unchanged and the patch region is zeroed.
inline Image strip_pattern(const Image& augmented, const PatternSpec& spec) {
  if (spec.placement == Placement::border) {
    const int p = spec.thickness;
    if (augmented.height <= 2 * p || augmented.width <= 2 * p)
      throw DimensionError("augmented image smaller than its border");
    Image out(augmented.height - 2 * p, augmented.width - 2 * p, augmented.channels);
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) out.at(c, y, x) = augmented.at(c, y + p, x + p);
    return out;
  }
  Image out = augmented;
  const Mask m = build_pattern_mask(spec, augmented.height, augmented.width);
  for (int c = 0; c < out.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        if (m.at(y, x)) out.at(c, y, x) = 0.0;
  return out;
}

// Query sent to the outpainter: the interior with the pattern region zeroed.
inline Image blank_pattern(const Image& augmented, const Mask& mask) {
  if (!mask.matches(augmented)) throw DimensionError("mask does not match image dims");
  Image out = augmented;
  for (int c = 0; c < out.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        if (mask.at(y, x)) out.at(c, y, x) = 0.0;
  return out;
}

// Augments every item with its key. Assigns keys first when the dataset has
// no keymap yet.
inline CaptionedDataset augment_dataset(const CaptionedDataset& ds, const PatternSpec& spec,
                                        std::optional<std::uint64_t> key_seed = std::nullopt) {
  if (ds.pattern) throw ConfigError("dataset is already pattern-augmented");
  require_unique_ids(ds);
  CaptionedDataset out = ds;
  if (!out.keymap) out.keymap = assign_keys(ds, key_seed.value_or(ds.seed), spec.color_mode);
  if (out.keymap->color_mode != spec.color_mode)
    throw ConfigError("keymap color mode does not match pattern color mode");
  for (auto& it : out.items) it.image = apply_pattern(it.image, out.keymap->at(it.id), spec);
  out.pattern = spec;
  return out;
}

// ---------------------------------------------------------------------------
// Duplication

inline std::string duplicate_id(const std::string& original, int copy) {
  return original + "~dup" + std::to_string(copy);
}

// Adds replication_counts[i] - 1 copies of image_ids[i]. Copies keep the
// caption, get fresh ids and record their provenance. With a keymap present
// each copy gets either a fresh key (independent_keys) or the original's key;
// pattern-augmented datasets re-stamp the copy with its own key.
inline CaptionedDataset inject_duplicates(const CaptionedDataset& ds,
                                          const std::vector<std::string>& image_ids,
                                          const std::vector<int>& replication_counts,
                                          bool independent_keys) {
  if (image_ids.size() != replication_counts.size())
    throw ConfigError("image_ids and replication_counts differ in length");
  require_unique_ids(ds);
  if (ds.pattern && !ds.keymap) throw KeymapAbsentError("augmented dataset has no keymap");

  CaptionedDataset out = ds;
  std::set<std::string> ids;
  for (const auto& it : ds.items) ids.insert(it.id);

  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    const int count = replication_counts[i];
    if (count < 2) throw ConfigError("replication count must be >= 2");
    const DatasetItem& orig = ds.find(image_ids[i]);
    for (int copy = 1; copy < count; ++copy) {
      DatasetItem dup = orig;
      dup.id = duplicate_id(orig.id, copy);
      dup.provenance = orig.provenance.empty() ? orig.id : orig.provenance;
      if (!ids.insert(dup.id).second)
        throw IntegrityError("duplicate id collision for '" + dup.id + "'");
      if (out.keymap) {
        const Key key = independent_keys ? draw_key(out.keymap->seed, dup.id, out.keymap->color_mode)
                                         : out.keymap->at(orig.id);
        out.keymap->entries[dup.id] = key;
        if (out.pattern) dup.image = apply_pattern(strip_pattern(orig.image, *out.pattern), key,
                                                   *out.pattern);
      }
      out.items.push_back(std::move(dup));
    }
    out.duplications.push_back({orig.id, count, independent_keys});
  }
  return out;
}

// Ids of every item whose provenance (or own id) is `original`.
inline std::vector<std::string> ids_with_provenance(const CaptionedDataset& ds,
                                                    const std::string& original) {
  std::vector<std::string> out;
  for (const auto& it : ds.items)
    if (it.id == original || it.provenance == original) out.push_back(it.id);
  return out;
}

// ---------------------------------------------------------------------------
// Query-time augmentations

enum class TransformKind { identity, crop, blur, rotate };

struct QueryTransform {
  TransformKind kind = TransformKind::identity;
  int level = 0;     // crop/blur level 0..4
  int degrees = 0;   // rotation, one of -2, -1, 1, 2, 180

  std::string name() const {
    switch (kind) {
      case TransformKind::crop: return "crop" + std::to_string(level);
      case TransformKind::blur: return "blur" + std::to_string(level);
      case TransformKind::rotate: return "rotate" + std::to_string(degrees);
      default: return "identity";
    }
  }

  void validate() const {
    if ((kind == TransformKind::crop || kind == TransformKind::blur) && (level < 0 || level > 4))
      throw ConfigError("augmentation level must be in 0..4, got " + std::to_string(level));
    if (kind == TransformKind::rotate && degrees != -2 && degrees != -1 && degrees != 1 &&
        degrees != 2 && degrees != 180)
      throw ConfigError("rotation must be one of -2, -1, 1, 2, 180 degrees, got " +
                        std::to_string(degrees));
  }

  friend bool operator==(const QueryTransform&, const QueryTransform&) = default;
};

// Parses "identity", "crop2", "blur1", "rotate-2", "rotate180".
inline QueryTransform parse_transform(const std::string& s) {
  QueryTransform t;
  auto number = [&](std::size_t off) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s.substr(off), &used);
      if (used != s.size() - off) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("unknown transform '" + s + "'");
    }
  };
  if (s == "identity") return t;
  if (s.rfind("crop", 0) == 0) {
    t.kind = TransformKind::crop;
    t.level = number(4);
  } else if (s.rfind("blur", 0) == 0) {
    t.kind = TransformKind::blur;
    t.level = number(4);
  } else if (s.rfind("rotate", 0) == 0) {
    t.kind = TransformKind::rotate;
    t.degrees = number(6);
  } else {
    throw ConfigError("unknown transform '" + s + "'");
  }
  t.validate();
  return t;
}

struct CropWindow {
  int y0, x0, height, width;
};

// Relative crop side 1 - 0.2 * level at a seeded random offset.
inline CropWindow crop_window(int height, int width, int level, Rng& rng) {
  const double rel = 1.0 - 0.2 * level;
  const int ch = std::max(1, static_cast<int>(std::lround(rel * height)));
  const int cw = std::max(1, static_cast<int>(std::lround(rel * width)));
  const int y0 = uniform_int(rng, 0, height - ch);
  const int x0 = uniform_int(rng, 0, width - cw);
  return {y0, x0, ch, cw};
}

inline int blur_kernel_side(int level) { return 4 * level + 1; }

namespace detail {

// Mirror index into [0, n) without repeating the edge sample.
inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline double sample_bilinear_reflect(const Image& img, int c, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  auto px = [&](int yy, int xx) {
    return img.at(c, reflect101(yy, img.height), reflect101(xx, img.width));
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

// Bilinear resize of a window with half-pixel centres.
inline Image resize_window(const Image& img, const CropWindow& w, int out_h, int out_w) {
  Image out(out_h, out_w, img.channels);
  const double sy = static_cast<double>(w.height) / out_h, sx = static_cast<double>(w.width) / out_w;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        const double src_y = std::clamp((y + 0.5) * sy - 0.5, 0.0, w.height - 1.0) + w.y0;
        const double src_x = std::clamp((x + 0.5) * sx - 0.5, 0.0, w.width - 1.0) + w.x0;
        out.at(c, y, x) = sample_bilinear_reflect(img, c, src_y, src_x);
      }
  return out;
}

inline std::vector<double> gaussian_kernel(int side) {
  // sigma rule used by common imaging libraries when only the size is given
  const double sigma = 0.3 * ((side - 1) * 0.5 - 1.0) + 0.8;
  std::vector<double> k(static_cast<std::size_t>(side));
  const int r = side / 2;
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i + r)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline Image gaussian_blur(const Image& img, int side) {
  const auto k = gaussian_kernel(side);
  const int r = side / 2;
  Image tmp = img, out = img;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] * img.at(c, y, reflect101(x + i, img.width));
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] * tmp.at(c, reflect101(y + i, img.height), x);
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

// Rotation about the image centre; out-of-frame samples are taken from the
// mirrored image, which is equivalent to reflect-padding then cropping.
inline Image rotate(const Image& img, int degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cy = (img.height - 1) * 0.5, cx = (img.width - 1) * 0.5;
  Image out(img.height, img.width, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double sx = ca * dx + sa * dy + cx;
        const double sy = -sa * dx + ca * dy + cy;
        out.at(c, y, x) = std::clamp(sample_bilinear_reflect(img, c, sy, sx), 0.0, 1.0);
      }
  return out;
}

}  // namespace detail

// Transforms a query interior (not an augmented image).
inline Image augment_query(const Image& image, const QueryTransform& t, std::uint64_t seed) {
  t.validate();
  switch (t.kind) {
    case TransformKind::crop: {
      if (t.level == 0) return image;
      Rng rng = derive_rng(seed, "crop");
      const CropWindow w = crop_window(image.height, image.width, t.level, rng);
      return detail::resize_window(image, w, image.height, image.width);
    }
    case TransformKind::blur:
      if (t.level == 0) return image;
      return detail::gaussian_blur(image, blur_kernel_side(t.level));
    case TransformKind::rotate: return detail::rotate(image, t.degrees);
    default: return image;
  }
}

// Transforms only the interior of an augmented image and re-stamps the
// pattern with `key` afterwards.
inline Image augment_augmented(const Image& augmented, const Key& key, const PatternSpec& spec,
                               const QueryTransform& t, std::uint64_t seed) {
  if (spec.placement == Placement::border)
    return apply_pattern(augment_query(strip_pattern(augmented, spec), t, seed), key, spec);
  return apply_pattern(augment_query(augmented, t, seed), key, spec);
}

// ---------------------------------------------------------------------------
// Storage: manifest.jsonl + dataset.json + keymap.json + 8-bit PNM rasters

inline void write_pnm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write raster " + path.string());
  f << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.size());
  std::size_t k = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        buf[k++] = static_cast<unsigned char>(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0));
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to " + path.string());
}

inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read raster " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  if ((magic != "P5" && magic != "P6") || w <= 0 || h <= 0 || maxv != 255)
    throw ParseError("unsupported raster header in " + path.string());
  f.get();
  const int ch = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * ch);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw ParseError("truncated raster " + path.string());
  Image img(h, w, ch);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) img.at(c, y, x) = buf[k++] / 255.0;
  return img;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("short write to " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline json pattern_to_json(const PatternSpec& p) {
  return {{"placement", to_string(p.placement)},
          {"thickness", p.thickness},
          {"color_mode", to_string(p.color_mode)}};
}

inline PatternSpec pattern_from_json(const json& j) {
  PatternSpec p;
  p.placement = parse_placement(j.at("placement").get<std::string>());
  p.thickness = j.at("thickness").get<int>();
  p.color_mode = parse_color_mode(j.at("color_mode").get<std::string>());
  if (p.thickness < 1) throw ConfigError("pattern thickness must be >= 1");
  return p;
}

inline json keymap_to_json(const Keymap& km) {
  json keys = json::object();
  for (const auto& [id, key] : km.entries) keys[id] = key.levels();
  return {{"seed", km.seed}, {"color_mode", to_string(km.color_mode)}, {"scale", 255},
          {"keys", keys}};
}

inline Keymap keymap_from_json(const json& j) {
  Keymap km;
  km.seed = j.at("seed").get<std::uint64_t>();
  km.color_mode = parse_color_mode(j.at("color_mode").get<std::string>());
  for (const auto& [id, levels] : j.at("keys").items()) {
    auto lv = levels.get<std::vector<int>>();
    for (int l : lv)
      if (l < 0 || l > 255) throw ParseError("key level out of range for '" + id + "'");
    km.entries.emplace(id, Key::from_levels(lv));
  }
  return km;
}

inline std::string image_file_name(const DatasetItem& it) {
  return "images/" + it.id + (it.image.channels == 1 ? ".pgm" : ".ppm");
}

inline void save_dataset(const CaptionedDataset& ds, const std::filesystem::path& dir) {
  require_unique_ids(ds);
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());

  std::string manifest;
  for (const auto& it : ds.items) {
    const std::string file = image_file_name(it);
    write_pnm(dir / file, it.image);
    json rec = {{"id", it.id}, {"file", file}, {"caption", it.caption}, {"class", it.label},
                {"provenance", it.provenance.empty() ? json(nullptr) : json(it.provenance)}};
    manifest += rec.dump() + "\n";
  }
  write_text(dir / "manifest.jsonl", manifest);

  json dups = json::array();
  for (const auto& d : ds.duplications)
    dups.push_back({{"id", d.id}, {"count", d.count}, {"independent_keys", d.independent_keys}});
  json meta = {{"format", "solidmark-dataset"},
               {"version", 1},
               {"seed", ds.seed},
               {"keyed", ds.keymap.has_value()},
               {"pattern", ds.pattern ? pattern_to_json(*ds.pattern) : json(nullptr)},
               {"duplications", dups}};
  write_text(dir / "dataset.json", meta.dump(2) + "\n");

  const auto keymap_path = dir / "keymap.json";
  if (ds.keymap) {
    write_text(keymap_path, keymap_to_json(*ds.keymap).dump(2) + "\n");
  } else {
    std::filesystem::remove(keymap_path, ec);
  }
}

inline CaptionedDataset load_dataset(const std::filesystem::path& dir) {
  CaptionedDataset ds;
  json meta;
  try {
    meta = json::parse(read_text(dir / "dataset.json"));
  } catch (const json::exception& e) {
    throw ParseError("corrupt dataset.json in " + dir.string() + ": " + e.what());
  }
  ds.seed = meta.value("seed", std::uint64_t{0});
  if (meta.contains("pattern") && !meta["pattern"].is_null())
    ds.pattern = pattern_from_json(meta["pattern"]);
  if (meta.contains("duplications"))
    for (const auto& d : meta["duplications"])
      ds.duplications.push_back({d.at("id").get<std::string>(), d.at("count").get<int>(),
                                 d.at("independent_keys").get<bool>()});

  std::istringstream lines(read_text(dir / "manifest.jsonl"));
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    DatasetItem it;
    std::string file;
    try {
      const json rec = json::parse(line);
      it.id = rec.at("id").get<std::string>();
      file = rec.at("file").get<std::string>();
      it.caption = rec.at("caption").get<std::string>();
      it.label = rec.at("class").get<int>();
      if (!rec.at("provenance").is_null()) it.provenance = rec["provenance"].get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError("corrupt manifest record at line " + std::to_string(lineno) + ": '" + line +
                       "' (" + e.what() + ")");
    }
    it.image = read_pnm(dir / file);
    ds.items.push_back(std::move(it));
  }
  require_unique_ids(ds);

  const auto keymap_path = dir / "keymap.json";
  if (meta.value("keyed", false)) {
    if (!std::filesystem::exists(keymap_path))
      throw KeymapAbsentError("keymap absent: " + keymap_path.string() +
                              " is declared by dataset.json but missing");
    try {
      ds.keymap = keymap_from_json(json::parse(read_text(keymap_path)));
    } catch (const json::exception& e) {
      throw ParseError("corrupt keymap " + keymap_path.string() + ": " + e.what());
    }
    for (const auto& it : ds.items)
      if (!ds.keymap->contains(it.id))
        throw IntegrityError("keymap has no key for image '" + it.id + "'");
  }
  return ds;
}

}  // namespace solidmark::imgdata
