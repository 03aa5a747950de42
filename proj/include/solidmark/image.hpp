#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "solidmark/error.hpp"

namespace solidmark {

// Planar (channel-major) real-valued image with pixels in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;  // index (c * height + y) * width + x

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0) : height(h), width(w), channels(c) {
    if (h <= 0 || w <= 0) throw DimensionError("image dimensions must be positive");
    if (c != 1 && c != 3) throw DimensionError("image channel count must be 1 or 3");
    pixels.assign(static_cast<std::size_t>(h) * w * c, fill);
  }

  std::size_t size() const { return pixels.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  double& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool same_dims(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  bool in_unit_range() const {
    return std::all_of(pixels.begin(), pixels.end(),
                       [](double v) { return v >= 0.0 && v <= 1.0; });
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void require_same_dims(const Image& a, const Image& b, const char* what) {
  if (!a.same_dims(b)) {
    throw DimensionError(std::string(what) + ": image dims differ (" +
                         std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                         std::to_string(a.channels) + " vs " + std::to_string(b.height) +
                         "x" + std::to_string(b.width) + "x" + std::to_string(b.channels) +
                         ")");
  }
}

enum class ColorMode { grayscale, rgb };
enum class Placement { border, center };

inline const char* to_string(ColorMode m) { return m == ColorMode::rgb ? "rgb" : "grayscale"; }
inline const char* to_string(Placement p) { return p == Placement::center ? "center" : "border"; }

inline ColorMode parse_color_mode(const std::string& s) {
  if (s == "grayscale") return ColorMode::grayscale;
  if (s == "rgb") return ColorMode::rgb;
  throw ConfigError("color_mode must be grayscale or rgb, got '" + s + "'");
}

inline Placement parse_placement(const std::string& s) {
  if (s == "border") return Placement::border;
  if (s == "center") return Placement::center;
  throw ConfigError("placement must be border or center, got '" + s + "'");
}

// Key intensity. One component in grayscale mode, three in rgb mode. Keys
// stored in a Keymap are snapped to the 256-level grid; predicted keys are
// arbitrary reals.
struct Key {
  std::vector<double> components;

  static Key from_levels(const std::vector<int>& levels) {
    Key k;
    for (int l : levels) k.components.push_back(l / 255.0);
    return k;
  }

  std::size_t size() const { return components.size(); }

  bool grid_snapped() const {
    return std::all_of(components.begin(), components.end(), [](double v) {
      const double scaled = v * 255.0;
      return v >= 0.0 && v <= 1.0 && std::abs(scaled - std::round(scaled)) < 1e-9;
    });
  }

  std::vector<int> levels() const {
    std::vector<int> out;
    for (double v : components) out.push_back(static_cast<int>(std::lround(v * 255.0)));
    return out;
  }

  // Value written into channel c of the pattern region.
  double channel_value(int c) const {
    return components.size() == 1 ? components[0] : components.at(static_cast<std::size_t>(c));
  }

  friend bool operator==(const Key&, const Key&) = default;
};

// Pattern geometry. Border mode appends a frame of `thickness` pixels on every
// side; center mode overwrites a centered thickness x thickness patch.
struct PatternSpec {
  Placement placement = Placement::border;
  int thickness = 4;
  ColorMode color_mode = ColorMode::grayscale;

  void validate_for(int height, int width) const {
    if (thickness < 1) throw ConfigError("pattern thickness must be >= 1");
    if (placement == Placement::center && (thickness > height || thickness > width)) {
      throw DimensionError("center patch of side " + std::to_string(thickness) +
                           " does not fit inside a " + std::to_string(height) + "x" +
                           std::to_string(width) + " image");
    }
  }

  int augmented_height(int base) const {
    return placement == Placement::border ? base + 2 * thickness : base;
  }
  int augmented_width(int base) const {
    return placement == Placement::border ? base + 2 * thickness : base;
  }

  friend bool operator==(const PatternSpec&, const PatternSpec&) = default;
};

// Per-pixel mask shared across channels: 1 marks the pattern (generated)
// region, 0 the known query region.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> values;

  Mask() = default;
  Mask(int h, int w, unsigned char fill) : height(h), width(w) {
    if (h <= 0 || w <= 0) throw DimensionError("mask dimensions must be positive");
    values.assign(static_cast<std::size_t>(h) * w, fill);
  }

  unsigned char at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  unsigned char& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1));
  }

  bool matches(const Image& img) const { return img.height == height && img.width == width; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

}  // namespace solidmark
