#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "solidmark/error.hpp"
#include "solidmark/image.hpp"
#include "solidmark/imgdata.hpp"
#include "solidmark/nn/unet.hpp"
#include "solidmark/random.hpp"

namespace solidmark::diffusion {

using json = nlohmann::json;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Noise schedule. Arrays are indexed by timestep t in [1, T]; index 0 holds
// the t = 0 convention (beta = 0, alpha_bar = 1).

struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta, alpha, alpha_bar, sigma;

  double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t)); }
  double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t)); }
  double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
  double sigma_at(int t) const { return sigma.at(static_cast<std::size_t>(t)); }
};

// Linear beta schedule with sigma_t^2 = beta_t.
inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.sigma.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = b;
    s.alpha[i] = 1.0 - b;
    s.alpha_bar[i] = s.alpha_bar[i - 1] * (1.0 - b);
    s.sigma[i] = std::sqrt(b);
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (t < 1 || t > s.steps) throw ConfigError("timestep " + std::to_string(t) + " outside [1, T]");
  nn::require_same_shape(x0, eps, "forward_noise");
  const double ab = s.alpha_bar_at(t);
  const float a = static_cast<float>(std::sqrt(ab)), b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor out = x0;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
  return out;
}

// Pixels in [0,1] map to model space [-1,1].
inline Tensor to_model_space(const Image& img) {
  Tensor t(img.channels, img.height, img.width);
  for (std::size_t i = 0; i < img.size(); ++i) t.data[i] = static_cast<float>(2.0 * img.pixels[i] - 1.0);
  return t;
}

inline Image to_image(const Tensor& t) {
  Image img(t.height, t.width, t.channels);
  for (std::size_t i = 0; i < t.size(); ++i)
    img.pixels[i] = std::clamp((static_cast<double>(t.data[i]) + 1.0) * 0.5, 0.0, 1.0);
  return img;
}

inline Tensor gaussian_tensor(Rng& rng, int c, int h, int w) {
  Tensor t(c, h, w);
  fill_normal(rng, t.data);
  return t;
}

// ---------------------------------------------------------------------------
// Conditioning

inline constexpr int kConditionDim = 32;

enum class ConditionSource { class_label, caption };

struct ConditionEmbedding {
  std::vector<float> values;
  ConditionSource source = ConditionSource::caption;

  friend bool operator==(const ConditionEmbedding&, const ConditionEmbedding&) = default;
};

namespace detail {

inline std::vector<double> token_vector(const std::string& token) {
  Rng rng = derive_rng(0x5eedULL, "token:" + token);
  std::vector<double> v(kConditionDim);
  fill_normal(rng, v);
  return v;
}

inline std::vector<std::string> tokenize(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline ConditionEmbedding normalize(std::vector<double> acc, ConditionSource src) {
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  // scaled to norm sqrt(dim) so components are O(1)
  const double scale = norm > 0 ? std::sqrt(static_cast<double>(kConditionDim)) / norm : 0.0;
  ConditionEmbedding e;
  e.source = src;
  for (double v : acc) e.values.push_back(static_cast<float>(v * scale));
  return e;
}

}  // namespace detail

// Deterministic bag-of-tokens embedder standing in for a text encoder: each
// whitespace token maps to a fixed pseudo-random Gaussian vector; the caption
// embedding is their normalized sum.
inline ConditionEmbedding embed_condition(const std::string& caption) {
  const auto tokens = detail::tokenize(caption);
  if (tokens.empty()) throw InputError("empty caption cannot be embedded in conditional mode");
  std::vector<double> acc(kConditionDim, 0.0);
  for (const auto& tok : tokens) {
    const auto v = detail::token_vector(tok);
    for (int i = 0; i < kConditionDim; ++i) acc[static_cast<std::size_t>(i)] += v[static_cast<std::size_t>(i)];
  }
  return detail::normalize(std::move(acc), ConditionSource::caption);
}

inline ConditionEmbedding embed_condition(int class_label) {
  return detail::normalize(detail::token_vector("<class:" + std::to_string(class_label) + ">"),
                           ConditionSource::class_label);
}

// Gaussian noise at inference: c' = c + eta, eta ~ N(0, magnitude^2).
inline ConditionEmbedding perturb_condition_gni(const ConditionEmbedding& c, double magnitude,
                                                std::uint64_t seed) {
  if (!(magnitude >= 0.0)) throw ConfigError("GNI magnitude must be >= 0");
  if (magnitude == 0.0) return c;
  Rng rng = derive_rng(seed, "gni");
  std::normal_distribution<double> dist(0.0, magnitude);
  ConditionEmbedding out = c;
  for (auto& v : out.values) v = static_cast<float>(v + dist(rng));
  return out;
}

inline constexpr double kDefaultGniMagnitude = 0.1;

// ---------------------------------------------------------------------------
// Denoisers

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual int channels() const = 0;
  virtual int height() const = 0;
  virtual int width() const = 0;
  virtual bool conditional() const = 0;
  // Predicts the noise in x_t. Unconditional denoisers ignore `cond`.
  virtual Tensor predict_noise(const Tensor& x_t, std::span<const float> cond, int t) const = 0;
};

enum class ConditionMode { conditional, unconditional };

// Trainable U-Net epsilon predictor.
class DenoiserModel : public Denoiser {
 public:
  DenoiserModel(int channels, int height, int width, ConditionMode mode, int base_width = 16,
                std::uint64_t init_seed = 0)
      : net_(make_config(channels, height, width, mode, base_width), init_seed), mode_(mode) {}

  DenoiserModel(const nn::UNetConfig& cfg, std::uint64_t init_seed = 0)
      : net_(cfg, init_seed),
        mode_(cfg.cond_dim > 0 ? ConditionMode::conditional : ConditionMode::unconditional) {}

  int channels() const override { return net_.config().in_channels; }
  int height() const override { return net_.config().height; }
  int width() const override { return net_.config().width; }
  bool conditional() const override { return mode_ == ConditionMode::conditional; }
  ConditionMode mode() const { return mode_; }

  Tensor predict_noise(const Tensor& x_t, std::span<const float> cond, int t) const override {
    return net_.predict(x_t, t, conditional() ? cond : std::span<const float>{});
  }

  nn::UNet& net() { return net_; }
  const nn::UNet& net() const { return net_; }

  bool parameters_finite() const {
    for (const auto& p : net_.parameters())
      for (float v : p.value)
        if (!std::isfinite(v)) return false;
    return true;
  }

  static nn::UNetConfig make_config(int channels, int height, int width, ConditionMode mode,
                                    int base_width) {
    nn::UNetConfig cfg;
    cfg.in_channels = channels;
    cfg.height = height;
    cfg.width = width;
    cfg.base_width = base_width;
    cfg.cond_dim = mode == ConditionMode::conditional ? kConditionDim : 0;
    return cfg;
  }

 private:
  nn::UNet net_;
  ConditionMode mode_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int steps = 1000;  // T
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double clip_norm = 1.0;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || !(learning_rate > 0) || steps < 1)
      throw ConfigError("train config values must be positive");
  }
};

inline json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"seed", c.seed},             {"steps", c.steps},           {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},     {"clip_norm", c.clip_norm}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  return c;
}

// Resumable training state; saved inside checkpoints.
struct TrainState {
  int epochs_done = 0;
  nn::Adam optimizer;
  std::vector<double> step_losses;   // mean loss of every optimizer step
  std::vector<double> epoch_losses;  // mean loss of every epoch
  bool initialized = false;
};

struct TrainingExample {
  Tensor x0;  // model space
  std::vector<float> cond;
};

inline std::vector<TrainingExample> prepare_examples(const DenoiserModel& model,
                                                     const imgdata::CaptionedDataset& ds) {
  std::vector<TrainingExample> out;
  out.reserve(ds.size());
  for (const auto& it : ds.items) {
    if (it.image.channels != model.channels() || it.image.height != model.height() ||
        it.image.width != model.width())
      throw DimensionError("dataset image '" + it.id + "' is " + std::to_string(it.image.height) +
                           "x" + std::to_string(it.image.width) + "x" +
                           std::to_string(it.image.channels) + " but the model expects " +
                           std::to_string(model.height()) + "x" + std::to_string(model.width()) +
                           "x" + std::to_string(model.channels()));
    TrainingExample ex;
    ex.x0 = to_model_space(it.image);
    if (model.conditional()) ex.cond = embed_condition(it.caption).values;
    out.push_back(std::move(ex));
  }
  return out;
}

// Accumulates the epsilon-matching gradient of one example into `g` and
// returns its loss (mean squared error over every pixel and channel).
inline double accumulate_example_gradient(const DenoiserModel& model, const TrainingExample& ex,
                                          int t, const Tensor& eps, const NoiseSchedule& s,
                                          nn::Gradients& g) {
  const Tensor x_t = forward_noise(ex.x0, t, eps, s);
  nn::Tape tape(model.net().parameters(), true);
  const std::span<const float> cond =
      model.conditional() ? std::span<const float>(ex.cond) : std::span<const float>{};
  const auto out = model.net().forward(tape, x_t, t, cond);
  const Tensor& pred = tape.value(out);
  Tensor seed(pred.channels, pred.height, pred.width);
  double loss = 0.0;
  const float scale = 2.0f / static_cast<float>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const float d = pred.data[i] - eps.data[i];
    loss += static_cast<double>(d) * d;
    seed.data[i] = scale * d;
  }
  tape.backward(out, seed, g);
  return loss / static_cast<double>(pred.size());
}

using TrainProgress = std::function<void(int epoch, double epoch_loss)>;

// Standard DDPM epsilon-matching. Each epoch draws its permutation, timesteps
// and noise from derive_rng(seed, "epoch", {epoch}), so a run resumed from a
// checkpoint at an epoch boundary reproduces the uninterrupted run exactly.
inline TrainState train(DenoiserModel& model, const imgdata::CaptionedDataset& ds,
                        const TrainConfig& cfg, TrainState state = {},
                        const TrainProgress& progress = nullptr) {
  cfg.validate();
  if (ds.size() == 0) throw ConfigError("cannot train on an empty dataset");
  const NoiseSchedule sched = make_linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end);
  const auto examples = prepare_examples(model, ds);
  auto& params = model.net().parameters();
  if (!state.initialized) {
    nn::AdamConfig ac;
    ac.learning_rate = cfg.learning_rate;
    ac.clip_norm = cfg.clip_norm;
    state.optimizer = nn::Adam(params, ac);
    state.initialized = true;
  }
  nn::Gradients grads(params);
  const int n = static_cast<int>(examples.size());
  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    Rng rng = derive_rng(cfg.seed, "epoch", {static_cast<std::uint64_t>(epoch)});
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)],
                                              order[static_cast<std::size_t>(uniform_int(rng, 0, i))]);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      grads.zero();
      double batch_loss = 0.0;
      for (int k = start; k < end; ++k) {
        const auto& ex = examples[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
        const int t = uniform_int(rng, 1, cfg.steps);
        const Tensor eps = gaussian_tensor(rng, ex.x0.channels, ex.x0.height, ex.x0.width);
        batch_loss += accumulate_example_gradient(model, ex, t, eps, sched, grads);
      }
      batch_loss /= (end - start);
      const long step = state.optimizer.steps() + 1;
      if (!std::isfinite(batch_loss)) throw TrainingError("non-finite training loss", step);
      state.optimizer.step(params, grads, end - start);
      state.step_losses.push_back(batch_loss);
      epoch_loss += batch_loss * (end - start);
    }
    epoch_loss /= n;
    state.epoch_losses.push_back(epoch_loss);
    state.epochs_done = epoch + 1;
    if (!model.parameters_finite())
      throw TrainingError("non-finite parameters after update", state.optimizer.steps());
    if (progress) progress(epoch, epoch_loss);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Strided ancestral sampling

// Respaced reverse process over a subset of timesteps. With as many steps as
// the schedule it reduces to the plain DDPM update.
struct SamplingPlan {
  std::vector<int> timesteps;  // descending, timesteps.back() == smallest
  std::vector<double> alpha_bar;       // abar at timesteps[i]
  std::vector<double> alpha_bar_prev;  // abar at the next (smaller) timestep, 1 at the end
};

inline SamplingPlan make_sampling_plan(const NoiseSchedule& s, int steps) {
  if (steps < 1) throw ConfigError("sampling steps must be >= 1");
  steps = std::min(steps, s.steps);
  SamplingPlan plan;
  for (int i = steps - 1; i >= 0; --i) {
    const int t = steps == 1 ? s.steps
                             : 1 + static_cast<int>(std::lround(static_cast<double>(s.steps - 1) * i / (steps - 1)));
    if (plan.timesteps.empty() || plan.timesteps.back() != t) plan.timesteps.push_back(t);
  }
  for (std::size_t i = 0; i < plan.timesteps.size(); ++i) {
    plan.alpha_bar.push_back(s.alpha_bar_at(plan.timesteps[i]));
    plan.alpha_bar_prev.push_back(i + 1 < plan.timesteps.size() ? s.alpha_bar_at(plan.timesteps[i + 1]) : 1.0);
  }
  return plan;
}

// One reverse step x_t -> x_prev; `noise` is ignored when `last` is set.
inline void ancestral_update(Tensor& x, const Tensor& eps_hat, double abar, double abar_prev,
                             const Tensor* noise) {
  const double alpha = abar / abar_prev;
  const double beta = 1.0 - alpha;
  const float inv_sqrt_alpha = static_cast<float>(1.0 / std::sqrt(alpha));
  const float coef = static_cast<float>(beta / std::sqrt(1.0 - abar));
  const float sigma = static_cast<float>(std::sqrt(beta));
  for (std::size_t i = 0; i < x.size(); ++i) {
    float v = inv_sqrt_alpha * (x.data[i] - coef * eps_hat.data[i]);
    if (noise) v += sigma * noise->data[i];
    x.data[i] = v;
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  for (float v : t.data)
    if (!std::isfinite(v)) throw ModelError(std::string(what) + " produced non-finite values");
}

// Draws one image; output clamped to [0,1].
inline Image sample(const Denoiser& model, std::span<const float> cond, const NoiseSchedule& s,
                    std::uint64_t seed, int sampling_steps = 0) {
  const SamplingPlan plan = make_sampling_plan(s, sampling_steps > 0 ? sampling_steps : s.steps);
  Rng rng = derive_rng(seed, "sample");
  Tensor x = gaussian_tensor(rng, model.channels(), model.height(), model.width());
  for (std::size_t i = 0; i < plan.timesteps.size(); ++i) {
    const bool last = i + 1 == plan.timesteps.size();
    const Tensor eps_hat = model.predict_noise(x, cond, plan.timesteps[i]);
    require_finite(eps_hat, "denoiser");
    Tensor z;
    if (!last) z = gaussian_tensor(rng, x.channels, x.height, x.width);
    ancestral_update(x, eps_hat, plan.alpha_bar[i], plan.alpha_bar_prev[i], last ? nullptr : &z);
  }
  return to_image(x);
}

// ---------------------------------------------------------------------------
// Checkpoints: "SMCK" | u32 version | u64 header bytes | JSON header |
// float32 parameters [| adam m | adam v] in parameter order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::unique_ptr<DenoiserModel> model;
  NoiseSchedule schedule;
  TrainConfig train_config;
  TrainState state;
  json extra;  // caller metadata (dataset path, pattern, ...)
};

inline json unet_config_to_json(const nn::UNetConfig& c) {
  return {{"in_channels", c.in_channels}, {"height", c.height},       {"width", c.width},
          {"base_width", c.base_width},   {"time_dim", c.time_dim},   {"emb_dim", c.emb_dim},
          {"cond_dim", c.cond_dim},       {"global_hidden", c.global_hidden}};
}

inline nn::UNetConfig unet_config_from_json(const json& j) {
  nn::UNetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.emb_dim = j.at("emb_dim").get<int>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.global_hidden = j.at("global_hidden").get<int>();
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                            const TrainConfig& cfg, const TrainState& state, const json& extra = {}) {
  json header = {{"format", "solidmark-checkpoint"},
                 {"version", kCheckpointVersion},
                 {"mode", model.conditional() ? "conditional" : "unconditional"},
                 {"unet", unet_config_to_json(model.net().config())},
                 {"schedule", {{"steps", cfg.steps}, {"beta_start", cfg.beta_start}, {"beta_end", cfg.beta_end}}},
                 {"train", train_config_to_json(cfg)},
                 {"epochs_done", state.epochs_done},
                 {"optimizer_steps", state.optimizer.steps()},
                 {"has_optimizer", state.initialized},
                 {"step_losses", state.step_losses},
                 {"epoch_losses", state.epoch_losses},
                 {"extra", extra}};
  const std::string h = header.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write("SMCK", 4);
  const std::uint32_t ver = kCheckpointVersion;
  const std::uint64_t len = h.size();
  f.write(reinterpret_cast<const char*>(&ver), sizeof ver);
  f.write(reinterpret_cast<const char*>(&len), sizeof len);
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  auto write_arrays = [&](const auto& arrays) {
    for (const auto& a : arrays)
      f.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(float)));
  };
  std::vector<std::vector<float>> values;
  for (const auto& p : model.net().parameters()) values.push_back(p.value);
  write_arrays(values);
  if (state.initialized) {
    write_arrays(state.optimizer.first_moments());
    write_arrays(state.optimizer.second_moments());
  }
  if (!f) throw IoError("short write to checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  char magic[4];
  std::uint32_t ver = 0;
  std::uint64_t len = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&ver), sizeof ver);
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || std::memcmp(magic, "SMCK", 4) != 0) throw ParseError("not a checkpoint: " + path.string());
  if (ver != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(ver));
  if (len > (1ULL << 32)) throw ParseError("implausible checkpoint header length");
  std::string h(len, '\0');
  f.read(h.data(), static_cast<std::streamsize>(len));
  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  const auto ucfg = unet_config_from_json(header.at("unet"));
  ck.model = std::make_unique<DenoiserModel>(ucfg);
  ck.train_config = train_config_from_json(header.at("train"));
  const auto& sj = header.at("schedule");
  ck.schedule = make_linear_schedule(sj.at("steps").get<int>(), sj.at("beta_start").get<double>(),
                                     sj.at("beta_end").get<double>());
  ck.extra = header.value("extra", json::object());
  auto& params = ck.model->net().parameters();
  auto read_arrays = [&](std::vector<std::vector<float>>& arrays) {
    for (auto& a : arrays) {
      f.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(float)));
      if (!f) throw ParseError("truncated checkpoint " + path.string());
    }
  };
  std::vector<std::vector<float>> values;
  for (const auto& p : params) values.emplace_back(p.size());
  read_arrays(values);
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = std::move(values[i]);
  ck.state.epochs_done = header.at("epochs_done").get<int>();
  ck.state.step_losses = header.at("step_losses").get<std::vector<double>>();
  ck.state.epoch_losses = header.at("epoch_losses").get<std::vector<double>>();
  if (header.at("has_optimizer").get<bool>()) {
    nn::AdamConfig ac;
    ac.learning_rate = ck.train_config.learning_rate;
    ac.clip_norm = ck.train_config.clip_norm;
    ck.state.optimizer = nn::Adam(params, ac);
    read_arrays(ck.state.optimizer.first_moments());
    read_arrays(ck.state.optimizer.second_moments());
    ck.state.optimizer.set_steps(header.at("optimizer_steps").get<long>());
    ck.state.initialized = true;
  }
  if (!ck.model->parameters_finite()) throw ModelError("checkpoint contains non-finite parameters");
  return ck;
}

}  // namespace solidmark::diffusion
