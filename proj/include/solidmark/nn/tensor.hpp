#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "solidmark/error.hpp"

namespace solidmark::nn {

// Dense float tensor with a fixed (channels, height, width) shape. Vectors
// use height = width = 1.
struct Tensor {
  int channels = 0;
  int height = 1;
  int width = 1;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, int h, int w, float fill = 0.0f) : channels(c), height(h), width(w) {
    data.assign(static_cast<std::size_t>(c) * h * w, fill);
  }

  static Tensor vector(std::vector<float> v) {
    Tensor t;
    t.channels = static_cast<int>(v.size());
    t.data = std::move(v);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::string shape_string() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape " + a.shape_string() + " vs " + b.shape_string());
}

// Trainable array. Gradients live outside the parameter (see Gradients) so a
// model can serve concurrent read-only forward passes.
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;

  std::size_t size() const { return value.size(); }
};

struct Gradients {
  std::vector<std::vector<float>> per_param;

  explicit Gradients(const std::vector<Parameter>& params) {
    for (const auto& p : params) per_param.emplace_back(p.size(), 0.0f);
  }

  void zero() {
    for (auto& g : per_param) std::fill(g.begin(), g.end(), 0.0f);
  }
};

}  // namespace solidmark::nn
