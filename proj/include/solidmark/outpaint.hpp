#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>

#include "solidmark/diffusion.hpp"
#include "solidmark/error.hpp"
#include "solidmark/image.hpp"

namespace solidmark::outpaint {

using diffusion::Denoiser;
using diffusion::NoiseSchedule;
using nn::Tensor;

// Maps model-space images ([-1,1], planar) to a latent tensor and back.
class Autoencoder {
 public:
  virtual ~Autoencoder() = default;
  virtual Tensor encode(const Tensor& image) const = 0;
  virtual Tensor decode(const Tensor& latent) const = 0;
  // Bound on |decode(encode(x)) - x| per entry, in model space.
  virtual double reconstruction_tolerance() const = 0;
};

class IdentityAutoencoder final : public Autoencoder {
 public:
  Tensor encode(const Tensor& image) const override { return image; }
  Tensor decode(const Tensor& latent) const override { return latent; }
  double reconstruction_tolerance() const override { return 0.0; }
};

// Per-pixel orthogonal mixing of the three colour channels. Invertible up to
// float rounding, so latents differ from pixels while dims stay equal.
class ChannelMixAutoencoder final : public Autoencoder {
 public:
  ChannelMixAutoencoder() {
    // Householder reflection I - 2 v v^T with v = (1, 2, 2) / 3; symmetric and
    // its own inverse.
    const double v[3] = {1.0 / 3, 2.0 / 3, 2.0 / 3};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m_[i][j] = (i == j ? 1.0 : 0.0) - 2.0 * v[i] * v[j];
  }

  Tensor encode(const Tensor& image) const override { return mix(image); }
  Tensor decode(const Tensor& latent) const override { return mix(latent); }
  double reconstruction_tolerance() const override { return 1e-5; }

 private:
  Tensor mix(const Tensor& in) const {
    if (in.channels != 3) throw DimensionError("channel-mix autoencoder needs 3 channels");
    Tensor out(in.channels, in.height, in.width);
    const std::size_t pl = in.plane();
    for (std::size_t p = 0; p < pl; ++p)
      for (int i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 3; ++j) acc += m_[i][j] * in.data[static_cast<std::size_t>(j) * pl + p];
        out.data[static_cast<std::size_t>(i) * pl + p] = static_cast<float>(acc);
      }
    return out;
  }

  double m_[3][3];
};

// How the known region is re-noised at a remask. `standard` uses the forward
// process at the noise level of x_{t-1}; `literal` reproduces the published
// pseudocode: sqrt(abar_t) x0 + (1 - abar_t) eps at the current t.
enum class KnownRegionNoising { standard, literal };

struct OutpaintConfig {
  int remask_period = 10;  // s; the pixel variant always remasks every step
  int sampling_steps = 50;
  std::uint64_t seed = 0;
  KnownRegionNoising noising = KnownRegionNoising::standard;
  bool terminal_remask = true;

  void validate() const {
    if (remask_period < 1) throw ConfigError("remask period must be >= 1");
    if (sampling_steps < 1) throw ConfigError("sampling steps must be >= 1");
  }
};

inline constexpr int kDefaultRemaskPeriod = 10;

namespace detail {

inline void check_inputs(const Denoiser& model, const Image& x, const Mask& m) {
  if (!m.matches(x)) throw DimensionError("mask dims do not match image dims");
  if (x.channels != model.channels() || x.height != model.height() || x.width != model.width())
    throw DimensionError("query image dims do not match the model");
}

// Blends generated content (mask = 1) with the re-noised known region.
inline void remask(Tensor& x, const Tensor& x0, const Mask& m, double abar_known, double noise_coef,
                   Rng& rng) {
  const Tensor eps = diffusion::gaussian_tensor(rng, x.channels, x.height, x.width);
  const float a = static_cast<float>(std::sqrt(abar_known)), b = static_cast<float>(noise_coef);
  const std::size_t pl = x.plane();
  for (int c = 0; c < x.channels; ++c)
    for (std::size_t p = 0; p < pl; ++p) {
      if (m.values[p]) continue;
      const std::size_t i = static_cast<std::size_t>(c) * pl + p;
      x.data[i] = a * x0.data[i] + b * eps.data[i];
    }
}

inline void remask_step(Tensor& x, const Tensor& x0, const Mask& m, const diffusion::SamplingPlan& plan,
                        std::size_t i, KnownRegionNoising noising, Rng& rng) {
  if (noising == KnownRegionNoising::literal) {
    const double ab = plan.alpha_bar[i];
    remask(x, x0, m, ab, 1.0 - ab, rng);
  } else {
    const double ab = plan.alpha_bar_prev[i];
    remask(x, x0, m, ab, std::sqrt(1.0 - ab), rng);
  }
}

inline void paste_known(Tensor& x, const Tensor& x0, const Mask& m) {
  const std::size_t pl = x.plane();
  for (int c = 0; c < x.channels; ++c)
    for (std::size_t p = 0; p < pl; ++p)
      if (!m.values[p]) x.data[static_cast<std::size_t>(c) * pl + p] = x0.data[static_cast<std::size_t>(c) * pl + p];
}

}  // namespace detail

// RePaint-style outpainting in pixel space: the masked region is sampled
// while the known region is replaced by its forward-noised version after
// every reverse step.
inline Image outpaint_pixel(const Denoiser& model, const Image& x, std::span<const float> cond,
                            const Mask& m, const NoiseSchedule& s, const OutpaintConfig& cfg) {
  cfg.validate();
  detail::check_inputs(model, x, m);
  const auto plan = diffusion::make_sampling_plan(s, cfg.sampling_steps);
  const Tensor x0 = diffusion::to_model_space(x);
  Rng rng = derive_rng(cfg.seed, "outpaint");
  Tensor z = diffusion::gaussian_tensor(rng, x0.channels, x0.height, x0.width);
  for (std::size_t i = 0; i < plan.timesteps.size(); ++i) {
    const bool last = i + 1 == plan.timesteps.size();
    const Tensor eps_hat = model.predict_noise(z, cond, plan.timesteps[i]);
    diffusion::require_finite(eps_hat, "denoiser");
    Tensor noise;
    if (!last) noise = diffusion::gaussian_tensor(rng, z.channels, z.height, z.width);
    diffusion::ancestral_update(z, eps_hat, plan.alpha_bar[i], plan.alpha_bar_prev[i],
                                last ? nullptr : &noise);
    detail::remask_step(z, x0, m, plan, i, cfg.noising, rng);
  }
  if (cfg.terminal_remask) detail::paste_known(z, x0, m);
  return diffusion::to_image(z);
}

// Outpainting for a denoiser that operates on autoencoder latents: the
// reverse process runs on latents; every `remask_period` steps the latent is
// decoded, remasked in image space and re-encoded. With the identity
// autoencoder and period 1 this is exactly outpaint_pixel.
inline Image outpaint_latent(const Denoiser& model, const Autoencoder& ae, const Image& x,
                             std::span<const float> cond, const Mask& m, const NoiseSchedule& s,
                             const OutpaintConfig& cfg) {
  cfg.validate();
  if (!m.matches(x)) throw DimensionError("mask dims do not match image dims");
  const auto plan = diffusion::make_sampling_plan(s, cfg.sampling_steps);
  const Tensor x0 = diffusion::to_model_space(x);
  const Tensor probe = ae.encode(x0);
  if (probe.channels != model.channels() || probe.height != model.height() || probe.width != model.width())
    throw DimensionError("autoencoder latent dims do not match the model");
  auto decode_checked = [&](const Tensor& latent) {
    Tensor d = ae.decode(latent);
    if (!d.same_shape(x0)) throw DimensionError("autoencoder decode changed the image dims");
    for (float v : d.data)
      if (!std::isfinite(v)) throw ModelError("autoencoder reconstruction is non-finite");
    return d;
  };
  Rng rng = derive_rng(cfg.seed, "outpaint");
  Tensor z = diffusion::gaussian_tensor(rng, probe.channels, probe.height, probe.width);
  const int steps = static_cast<int>(plan.timesteps.size());
  for (int i = 0; i < steps; ++i) {
    const bool last = i + 1 == steps;
    const Tensor eps_hat = model.predict_noise(z, cond, plan.timesteps[static_cast<std::size_t>(i)]);
    diffusion::require_finite(eps_hat, "denoiser");
    Tensor noise;
    if (!last) noise = diffusion::gaussian_tensor(rng, z.channels, z.height, z.width);
    diffusion::ancestral_update(z, eps_hat, plan.alpha_bar[static_cast<std::size_t>(i)],
                                plan.alpha_bar_prev[static_cast<std::size_t>(i)], last ? nullptr : &noise);
    // remask on the strided step index, counted down from `steps` to 1
    if ((steps - i) % cfg.remask_period == 0) {
      Tensor xi = decode_checked(z);
      detail::remask_step(xi, x0, m, plan, static_cast<std::size_t>(i), cfg.noising, rng);
      z = ae.encode(xi);
    }
  }
  Tensor out = decode_checked(z);
  if (cfg.terminal_remask) {
    detail::paste_known(out, x0, m);
    out = decode_checked(ae.encode(out));
  }
  return diffusion::to_image(out);
}

// Mean over masked pixels: one component in grayscale mode, per-channel
// means in rgb mode.
inline Key predicted_key(const Image& outpainted, const Mask& m, ColorMode mode) {
  if (!m.matches(outpainted)) throw DimensionError("mask dims do not match image dims");
  const std::size_t n = m.count();
  if (n == 0) throw DomainError("predicted_key needs a non-empty mask");
  std::vector<double> sums(static_cast<std::size_t>(outpainted.channels), 0.0);
  for (int c = 0; c < outpainted.channels; ++c)
    for (int y = 0; y < outpainted.height; ++y)
      for (int x = 0; x < outpainted.width; ++x)
        if (m.at(y, x)) sums[static_cast<std::size_t>(c)] += outpainted.at(c, y, x);
  Key k;
  if (mode == ColorMode::rgb) {
    if (outpainted.channels != 3) throw DimensionError("rgb keys need a 3-channel image");
    for (double s : sums) k.components.push_back(s / static_cast<double>(n));
  } else {
    double total = 0.0;
    for (double s : sums) total += s;
    k.components.push_back(total / static_cast<double>(n * sums.size()));
  }
  return k;
}

}  // namespace solidmark::outpaint
