#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "solidmark/nn/tape.hpp"
#include "solidmark/random.hpp"

namespace solidmark::nn {

struct UNetConfig {
  int in_channels = 3;
  int height = 40;
  int width = 40;
  int base_width = 16;     // channels at full resolution; 2x at the lower levels
  int time_dim = 32;       // sinusoidal features
  int emb_dim = 64;        // shared time/condition embedding width
  int cond_dim = 32;       // 0 for unconditional models
  int global_hidden = 64;  // dense bottleneck width

  void validate() const {
    if (in_channels < 1 || base_width < 1 || time_dim < 2 || time_dim % 2 || emb_dim < 1 ||
        cond_dim < 0 || global_hidden < 1)
      throw ConfigError("invalid U-Net configuration");
    if (height % 4 || width % 4 || height < 4 || width < 4)
      throw DimensionError("U-Net input dims must be positive multiples of 4, got " +
                           std::to_string(height) + "x" + std::to_string(width));
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

// Sinusoidal features of the integer timestep.
inline std::vector<float> timestep_features(int t, int dim) {
  std::vector<float> out(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * freq));
    out[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
  }
  return out;
}

// Three-level convolutional U-Net epsilon predictor. Every residual block
// receives a per-channel bias from the shared time(+condition) embedding; the
// lowest level additionally passes through a dense layer over the whole
// feature map so image-wide information (such as a border intensity) can be
// tied to image content.
class UNet {
 public:
  explicit UNet(const UNetConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    build();
    init(seed);
  }

  const UNetConfig& config() const { return cfg_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  // Records the forward pass on `tape` and returns the output variable.
  Tape::Var forward(Tape& tape, const Tensor& x, int t, std::span<const float> cond) const {
    if (x.channels != cfg_.in_channels || x.height != cfg_.height || x.width != cfg_.width)
      throw DimensionError("U-Net input " + x.shape_string() + " does not match model dims " +
                           std::to_string(cfg_.in_channels) + "x" + std::to_string(cfg_.height) +
                           "x" + std::to_string(cfg_.width));
    auto emb = tape.linear(tape.input(Tensor::vector(timestep_features(t, cfg_.time_dim))),
                           idx("temb1.w"), idx("temb1.b"));
    emb = tape.linear(tape.silu(emb), idx("temb2.w"), idx("temb2.b"));
    if (cfg_.cond_dim > 0) {
      if (cond.size() != static_cast<std::size_t>(cfg_.cond_dim))
        throw DimensionError("condition embedding has " + std::to_string(cond.size()) +
                             " entries, model expects " + std::to_string(cfg_.cond_dim));
      auto c = tape.linear(tape.input(Tensor::vector({cond.begin(), cond.end()})), idx("cemb.w"),
                           idx("cemb.b"));
      emb = tape.add(emb, c);
    }
    const auto e = tape.silu(emb);

    auto h = conv(tape, tape.input(x), "in");
    const auto h0 = res_block(tape, h, e, "r0");

    auto d = conv(tape, tape.avg_pool2(h0), "down1");
    const auto h1 = res_block(tape, d, e, "r1");

    d = conv(tape, tape.avg_pool2(h1), "down2");
    auto g = tape.linear(tape.silu(d), idx("global1.w"), idx("global1.b"));
    g = tape.linear(tape.silu(g), idx("global2.w"), idx("global2.b"));
    d = tape.add_channel_bias(d, g);
    const auto h2 = res_block(tape, d, e, "r2");

    auto u = conv(tape, tape.concat(tape.upsample2(h2), h1), "up1");
    u = res_block(tape, u, e, "r3");
    u = conv(tape, tape.concat(tape.upsample2(u), h0), "up0");
    u = res_block(tape, u, e, "r4");
    return conv(tape, tape.silu(u), "out");
  }

  Tensor predict(const Tensor& x, int t, std::span<const float> cond) const {
    Tape tape(params_, false);
    const auto out = forward(tape, x, t, cond);
    return tape.value(out);
  }

  int idx(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ModelError("unknown parameter " + name);
    return it->second;
  }

 private:
  void add_param(const std::string& name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    index_[name] = static_cast<int>(params_.size());
    params_.push_back({name, std::move(shape), std::vector<float>(n, 0.0f)});
  }

  void add_conv(const std::string& name, int cin, int cout) {
    add_param(name + ".w", {cout, cin * 9});
    add_param(name + ".b", {cout});
  }

  void add_linear(const std::string& name, int nin, int nout) {
    add_param(name + ".w", {nout, nin});
    add_param(name + ".b", {nout});
  }

  void add_res(const std::string& name, int ch) {
    add_conv(name + ".conv1", ch, ch);
    add_linear(name + ".emb", cfg_.emb_dim, ch);
    add_conv(name + ".conv2", ch, ch);
  }

  void build() {
    const int c1 = cfg_.base_width, c2 = 2 * cfg_.base_width;
    add_linear("temb1", cfg_.time_dim, cfg_.emb_dim);
    add_linear("temb2", cfg_.emb_dim, cfg_.emb_dim);
    if (cfg_.cond_dim > 0) add_linear("cemb", cfg_.cond_dim, cfg_.emb_dim);
    add_conv("in", cfg_.in_channels, c1);
    add_res("r0", c1);
    add_conv("down1", c1, c2);
    add_res("r1", c2);
    add_conv("down2", c2, c2);
    add_linear("global1", c2 * (cfg_.height / 4) * (cfg_.width / 4), cfg_.global_hidden);
    add_linear("global2", cfg_.global_hidden, c2);
    add_res("r2", c2);
    add_conv("up1", 2 * c2, c2);
    add_res("r3", c2);
    add_conv("up0", c2 + c1, c1);
    add_res("r4", c1);
    add_conv("out", c1, cfg_.in_channels);
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases; the
  // output convolution and the second convolution of each residual block
  // start at zero so the untrained network is close to the identity path.
  void init(std::uint64_t seed) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.shape.size() != 2) continue;
      if (p.name == "out.w" || p.name.find(".conv2.w") != std::string::npos) continue;
      Rng rng = derive_rng(seed, "init:" + p.name);
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.shape[1]));
      for (auto& v : p.value) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
    }
  }

  Tape::Var conv(Tape& tape, Tape::Var x, const std::string& name) const {
    return tape.conv3x3(x, idx(name + ".w"), idx(name + ".b"));
  }

  Tape::Var res_block(Tape& tape, Tape::Var x, Tape::Var e, const std::string& name) const {
    auto a = conv(tape, tape.silu(x), name + ".conv1");
    a = tape.add_channel_bias(a, tape.linear(e, idx(name + ".emb.w"), idx(name + ".emb.b")));
    a = conv(tape, tape.silu(a), name + ".conv2");
    return tape.add(x, a);
  }

  UNetConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, int> index_;
};

// Adam with global-norm gradient clipping.
struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Parameter>& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0f);
      v_.emplace_back(p.size(), 0.0f);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return step_; }

  // Applies one update from gradients averaged over `batch` examples.
  // Returns the pre-clipping global gradient norm.
  double step(std::vector<Parameter>& params, const Gradients& g, int batch) {
    ++step_;
    const double inv = 1.0 / batch;
    double sq = 0.0;
    for (const auto& gp : g.per_param)
      for (float x : gp) sq += static_cast<double>(x) * x * inv * inv;
    const double norm = std::sqrt(sq);
    double scale = inv;
    if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) scale *= cfg_.clip_norm / norm;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float lr = static_cast<float>(cfg_.learning_rate * std::sqrt(bc2) / bc1);
    const float eps = static_cast<float>(cfg_.epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& val = params[i].value;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& gp = g.per_param[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        const float gj = static_cast<float>(gp[j] * scale);
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        val[j] -= lr * m[j] / (std::sqrt(v[j]) + eps);
      }
    }
    return norm;
  }

  // Raw state access for checkpointing.
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(long s) { step_ = s; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long step_ = 0;
};

}  // namespace solidmark::nn
