#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "solidmark/captions.hpp"
#include "solidmark/csv.hpp"
#include "solidmark/diffusion.hpp"
#include "solidmark/imgdata.hpp"
#include "solidmark/metrics.hpp"
#include "solidmark/solidmark.hpp"

namespace solidmark::experiments {

using json = nlohmann::json;
using nn::Tensor;

// ---------------------------------------------------------------------------
// Chance rates

// P(|U - V| <= delta) for independent uniforms on [0, 1].
inline double fp_rate_closed_form(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw DomainError("delta must lie in [0, 1]");
  return chance_rate(delta);
}

// Same probability for keys and predictions on the 256-level grid:
// pairs (i, j) with |i - j| <= floor(255 delta) out of 256^2.
inline double fp_rate_grid(double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw DomainError("delta must lie in [0, 1]");
  const int m = std::min(255, static_cast<int>(std::floor(255.0 * delta + 1e-9)));
  double pairs = 256.0;
  for (int d = 1; d <= m; ++d) pairs += 2.0 * (256 - d);
  return pairs / 65536.0;
}

inline double any_of(double p, int trials) { return 1.0 - std::pow(1.0 - p, trials); }

// 3 binomial standard errors of a count out of n at rate p.
inline double noise_floor(double p, std::size_t n) {
  return 3.0 * std::sqrt(p * (1.0 - p) * static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Oracle models

namespace detail {
inline Image fill_pattern(const Image& query, const Mask& mask, const Key& key) {
  Image out = query;
  for (int c = 0; c < out.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        if (mask.at(y, x)) out.at(c, y, x) = key.channel_value(c);
  return out;
}

inline double known_region_distance(const Image& a, const Image& b, const Mask& mask) {
  double acc = 0.0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x)
        if (!mask.at(y, x)) {
          const double d = a.at(c, y, x) - b.at(c, y, x);
          acc += d * d;
        }
  return acc;
}
}  // namespace detail

// Never memorizes: fills the pattern region with a constant drawn uniformly
// from the 256-level grid per call seed.
class UnmemorizedOracle final : public Outpainter {
 public:
  explicit UnmemorizedOracle(ColorMode mode = ColorMode::grayscale, std::uint64_t seed = 0)
      : mode_(mode), seed_(seed) {}

  Image outpaint(const Image& query, const Mask& mask, std::span<const float>,
                 std::uint64_t seed) const override {
    Rng rng = derive_rng(seed_, "unmemorized", {seed});
    std::vector<int> levels(mode_ == ColorMode::rgb ? 3 : 1);
    for (auto& l : levels) l = uniform_int(rng, 0, 255);
    return detail::fill_pattern(query, mask, Key::from_levels(levels));
  }
  bool uses_condition() const override { return false; }

 private:
  ColorMode mode_;
  std::uint64_t seed_;
};

// Emits the exact training pattern for memorized ids. The id is recovered by
// matching the query's known region against the training images (closest
// match; exact for untransformed queries). Other ids fall back to the
// unmemorized behaviour.
class MemorizingOracle final : public Outpainter {
 public:
  MemorizingOracle(const imgdata::CaptionedDataset& ds, std::set<std::string> memorized,
                   std::uint64_t seed = 0)
      : fallback_(ds.keymap ? ds.keymap->color_mode : ColorMode::grayscale, seed) {
    if (!ds.pattern || !ds.keymap) throw ConfigError("memorizing oracle needs an augmented dataset");
    for (const auto& it : ds.items)
      entries_.push_back({it.id, it.image, ds.keymap->at(it.id), memorized.count(it.id) != 0});
  }

  Image outpaint(const Image& query, const Mask& mask, std::span<const float> cond,
                 std::uint64_t seed) const override {
    const Entry* best = nullptr;
    double best_d = 0.0;
    for (const auto& e : entries_) {
      if (!e.image.same_dims(query)) continue;
      const double d = detail::known_region_distance(query, e.image, mask);
      if (!best || d < best_d) {
        best = &e;
        best_d = d;
      }
    }
    if (best && best->memorized) return detail::fill_pattern(query, mask, best->key);
    return fallback_.outpaint(query, mask, cond, seed);
  }
  bool uses_condition() const override { return false; }

 private:
  struct Entry {
    std::string id;
    Image image;
    Key key;
    bool memorized;
  };
  std::vector<Entry> entries_;
  UnmemorizedOracle fallback_;
};

// Optimal denoiser for the empirical training distribution: predicts the
// noise implied by E[y | x_t], a softmax over training images weighted by
// exp(-|x_t - sqrt(abar) y|^2 / (2 (1 - abar))). Sampling with it reproduces
// training images.
class MemorizingDenoiser final : public diffusion::Denoiser {
 public:
  MemorizingDenoiser(const imgdata::CaptionedDataset& ds, diffusion::NoiseSchedule schedule)
      : schedule_(std::move(schedule)) {
    if (ds.items.empty()) throw InputError("memorizing denoiser needs training images");
    for (const auto& it : ds.items) train_.push_back(diffusion::to_model_space(it.image));
    for (const auto& t : train_)
      if (!t.same_shape(train_.front())) throw DimensionError("training images differ in size");
  }

  int channels() const override { return train_.front().channels; }
  int height() const override { return train_.front().height; }
  int width() const override { return train_.front().width; }
  bool conditional() const override { return false; }

  Tensor predict_noise(const Tensor& x_t, std::span<const float>, int t) const override {
    if (t < 1 || t > schedule_.steps) throw DomainError("timestep out of range");
    const double abar = schedule_.alpha_bar[static_cast<std::size_t>(t)];
    const double a = std::sqrt(abar);
    std::vector<double> logw(train_.size());
    for (std::size_t k = 0; k < train_.size(); ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double r = x_t.data[i] - a * train_[k].data[i];
        d += r * r;
      }
      logw[k] = -d / (2.0 * (1.0 - abar));
    }
    const double top = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (auto& w : logw) total += (w = std::exp(w - top));
    std::vector<double> mean(x_t.size(), 0.0);
    for (std::size_t k = 0; k < train_.size(); ++k) {
      if (logw[k] / total < 1e-12) continue;
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += logw[k] / total * train_[k].data[i];
    }
    Tensor eps(x_t.channels, x_t.height, x_t.width);
    const double inv = 1.0 / std::sqrt(1.0 - abar);
    for (std::size_t i = 0; i < eps.size(); ++i) eps.data[i] = static_cast<float>((x_t.data[i] - a * mean[i]) * inv);
    return eps;
  }

 private:
  diffusion::NoiseSchedule schedule_;
  std::vector<Tensor> train_;
};

// ---------------------------------------------------------------------------
// Runs

struct Arm {
  std::string name;
  double x = 0.0;  // position on the arm axis (level, magnitude, thickness...)
  json params = json::object();
  bool ok = true;
  std::string error;
  std::vector<double> deltas;
  std::vector<std::size_t> counts;
  std::size_t n = 0;
  std::vector<double> chance;  // expected fraction under the null, per delta
  std::optional<MemorizationReport> report;
  json extra = json::object();

  double fraction(std::size_t i) const {
    return n == 0 ? 0.0 : static_cast<double>(counts.at(i)) / static_cast<double>(n);
  }
};

struct ExperimentRun {
  std::string name;
  json config = json::object();
  std::vector<Arm> arms;
  std::optional<std::size_t> baseline;  // arm index that % changes refer to
  json extra = json::object();

  const Arm& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.name == name) return a;
    throw LookupError("no arm named '" + name + "'");
  }
};

// (new - old) / old in percent; empty when the baseline count is zero.
inline std::optional<double> percent_change(std::size_t old_count, std::size_t new_count) {
  if (old_count == 0) return std::nullopt;
  return 100.0 * (static_cast<double>(new_count) - static_cast<double>(old_count)) /
         static_cast<double>(old_count);
}

inline std::optional<double> percent_change(const ExperimentRun& run, std::size_t arm, std::size_t delta) {
  if (!run.baseline) return std::nullopt;
  const Arm& b = run.arms.at(*run.baseline);
  const Arm& a = run.arms.at(arm);
  if (!a.ok || !b.ok) return std::nullopt;
  return percent_change(b.counts.at(delta), a.counts.at(delta));
}

inline Arm arm_from_report(std::string name, double x, MemorizationReport rep, std::vector<double> chance) {
  Arm a;
  a.name = std::move(name);
  a.x = x;
  a.deltas = rep.deltas;
  a.counts = rep.counts;
  a.n = rep.size();
  a.chance = std::move(chance);
  a.report = std::move(rep);
  return a;
}

inline Arm failed_arm(std::string name, double x, const std::string& error) {
  Arm a;
  a.name = std::move(name);
  a.x = x;
  a.ok = false;
  a.error = error;
  return a;
}

// Runs `body`; an exception marks only this arm failed.
template <class Body>
Arm run_arm(const std::string& name, double x, Body&& body) {
  try {
    Arm a = body();
    a.name = name;
    a.x = x;
    return a;
  } catch (const std::exception& e) {
    return failed_arm(name, x, e.what());
  }
}

inline std::string run_csv(const ExperimentRun& run) {
  std::string out = csv_row({"arm", "x", "status", "delta", "n", "count", "fraction", "chance_fraction",
                             "pct_change"});
  for (std::size_t a = 0; a < run.arms.size(); ++a) {
    const Arm& arm = run.arms[a];
    if (!arm.ok) {
      out += csv_row({arm.name, format_number(arm.x), "failed", "", "", "", "", "", ""});
      continue;
    }
    for (std::size_t i = 0; i < arm.deltas.size(); ++i) {
      const auto pc = percent_change(run, a, i);
      out += csv_row({arm.name, format_number(arm.x), "ok", format_number(arm.deltas[i]),
                      std::to_string(arm.n), std::to_string(arm.counts[i]), format_number(arm.fraction(i)),
                      i < arm.chance.size() ? format_number(arm.chance[i]) : "",
                      pc ? format_number(*pc) : ""});
    }
  }
  return out;
}

inline json run_summary(const ExperimentRun& run) {
  json arms = json::array();
  for (std::size_t a = 0; a < run.arms.size(); ++a) {
    const Arm& arm = run.arms[a];
    json j = {{"name", arm.name}, {"x", arm.x}, {"params", arm.params}, {"status", arm.ok ? "ok" : "failed"}};
    if (!arm.ok) {
      j["error"] = arm.error;
    } else {
      json rows = json::array();
      for (std::size_t i = 0; i < arm.deltas.size(); ++i) {
        const auto pc = percent_change(run, a, i);
        rows.push_back({{"delta", arm.deltas[i]},
                        {"count", arm.counts[i]},
                        {"fraction", arm.fraction(i)},
                        {"chance_fraction", i < arm.chance.size() ? json(arm.chance[i]) : json(nullptr)},
                        {"pct_change", pc ? json(*pc) : json(nullptr)}});
      }
      j["n"] = arm.n;
      j["thresholds"] = rows;
    }
    if (!arm.extra.empty()) j["extra"] = arm.extra;
    arms.push_back(std::move(j));
  }
  json out = {{"experiment", run.name}, {"config", run.config}, {"arms", arms}};
  out["baseline"] = run.baseline ? json(run.arms[*run.baseline].name) : json(nullptr);
  if (!run.extra.empty()) out["extra"] = run.extra;
  return out;
}

// x,y series per delta: x is the arm axis, y the eidetic fraction.
inline std::string plot_data_csv(const ExperimentRun& run) {
  std::string out = csv_row({"series", "x", "y"});
  std::vector<double> deltas;
  for (const auto& a : run.arms)
    if (a.ok) {
      deltas = a.deltas;
      break;
    }
  for (std::size_t i = 0; i < deltas.size(); ++i)
    for (const auto& a : run.arms)
      if (a.ok) out += csv_row({"delta=" + format_number(deltas[i]), format_number(a.x), format_number(a.fraction(i))});
  return out;
}

// ---------------------------------------------------------------------------
// Models

struct ModelSpec {
  int base_width = 16;
  std::uint64_t init_seed = 0;
  diffusion::ConditionMode mode = diffusion::ConditionMode::conditional;
};

inline json model_spec_to_json(const ModelSpec& m) {
  return {{"base_width", m.base_width},
          {"init_seed", m.init_seed},
          {"conditional", m.mode == diffusion::ConditionMode::conditional}};
}

inline std::unique_ptr<diffusion::DenoiserModel> train_model(const imgdata::CaptionedDataset& ds,
                                                             const diffusion::TrainConfig& tc, const ModelSpec& ms,
                                                             const diffusion::TrainProgress& progress = {}) {
  if (ds.items.empty()) throw InputError("cannot train on an empty dataset");
  const Image& first = ds.items.front().image;
  auto model = std::make_unique<diffusion::DenoiserModel>(first.channels, first.height, first.width, ms.mode,
                                                          ms.base_width, ms.init_seed);
  diffusion::train(*model, ds, tc, {}, progress);
  return model;
}

inline diffusion::NoiseSchedule schedule_for(const diffusion::TrainConfig& tc) {
  return diffusion::make_linear_schedule(tc.steps, tc.beta_start, tc.beta_end);
}

// ---------------------------------------------------------------------------
// Duplication study

struct DuplicationConfig {
  std::vector<int> levels{1, 4, 16};
  int images_per_level = 10;
  int control_images = 40;  // evaluated at level 1 (never duplicated)
  bool independent_keys = true;
  std::uint64_t selection_seed = 0;

  void validate() const {
    if (levels.empty()) throw ConfigError("duplication levels must not be empty");
    for (int l : levels)
      if (l < 1) throw ConfigError("duplication levels must be >= 1");
    if (images_per_level < 1 || control_images < 1) throw ConfigError("images per level must be >= 1");
  }

  int images_for(int level) const { return level == 1 ? control_images : images_per_level; }
};

struct DuplicationFixture {
  imgdata::CaptionedDataset dataset;
  std::map<int, std::vector<std::string>> ids_by_level;
};

// Picks disjoint id groups per level from an augmented dataset and injects
// (level - 1) extra copies of each.
inline DuplicationFixture build_duplication_dataset(const imgdata::CaptionedDataset& augmented,
                                                    const DuplicationConfig& cfg) {
  cfg.validate();
  if (!augmented.pattern) throw ConfigError("duplication study needs a pattern-augmented dataset");
  std::size_t needed = 0;
  for (int l : cfg.levels) needed += static_cast<std::size_t>(cfg.images_for(l));
  const auto pick = sample_subset(augmented.size(), needed, cfg.selection_seed);
  DuplicationFixture fx;
  std::vector<std::string> ids;
  std::vector<int> counts;
  std::size_t next = 0;
  for (int l : cfg.levels) {
    auto& group = fx.ids_by_level[l];
    for (int i = 0; i < cfg.images_for(l); ++i) {
      const auto& id = augmented.items[pick[next++]].id;
      group.push_back(id);
      if (l > 1) {
        ids.push_back(id);
        counts.push_back(l);
      }
    }
    std::sort(group.begin(), group.end());
  }
  fx.dataset = ids.empty() ? augmented : imgdata::inject_duplicates(augmented, ids, counts, cfg.independent_keys);
  return fx;
}

inline json duplication_config_to_json(const DuplicationConfig& c) {
  return {{"levels", c.levels},
          {"images_per_level", c.images_per_level},
          {"control_images", c.control_images},
          {"independent_keys", c.independent_keys},
          {"selection_seed", c.selection_seed}};
}

// Per level, the fraction of originals for which any of their keys is
// recovered within delta.
inline ExperimentRun evaluate_duplication(const Outpainter& outpainter, const DuplicationFixture& fx,
                                          const DuplicationConfig& dcfg, const EvalConfig& ecfg) {
  const auto all = queries_from_dataset(fx.dataset, true);
  ExperimentRun run;
  run.name = "duplication";
  run.config = {{"duplication", duplication_config_to_json(dcfg)},
                {"evaluation", eval_config_to_json(ecfg, *fx.dataset.pattern)}};
  for (const auto& [level, ids] : fx.ids_by_level) {
    run.arms.push_back(run_arm("level" + std::to_string(level), level, [&] {
      std::vector<ImageQuery> qs;
      for (const auto& q : all)
        if (std::binary_search(ids.begin(), ids.end(), q.id)) qs.push_back(q);
      EvalConfig c = ecfg;
      c.subset_size.reset();
      auto rep = evaluate_queries(outpainter, qs, *fx.dataset.pattern, c);
      const int keys = dcfg.independent_keys ? level : 1;
      std::vector<double> chance, chance_grid;
      for (double d : rep.deltas) {
        chance.push_back(any_of(fp_rate_closed_form(d), keys * c.repeats));
        chance_grid.push_back(any_of(fp_rate_grid(d), keys * c.repeats));
      }
      Arm a = arm_from_report("", level, std::move(rep), chance);
      a.params = {{"level", level}, {"keys_per_image", keys}};
      a.extra["chance_fraction_grid"] = chance_grid;
      return a;
    }));
  }
  return run;
}

inline ExperimentRun run_duplication_study(const imgdata::CaptionedDataset& augmented, const DuplicationConfig& dcfg,
                                           const diffusion::TrainConfig& tc, const ModelSpec& ms,
                                           const EvalConfig& ecfg, const outpaint::OutpaintConfig& ocfg,
                                           OutpaintVariant variant = OutpaintVariant::pixel) {
  const auto fx = build_duplication_dataset(augmented, dcfg);
  const auto model = train_model(fx.dataset, tc, ms);
  DiffusionOutpainter op(*model, schedule_for(tc), ocfg, variant);
  auto run = evaluate_duplication(op, fx, dcfg, ecfg);
  run.config["train"] = diffusion::train_config_to_json(tc);
  run.config["model"] = model_spec_to_json(ms);
  return run;
}

// ---------------------------------------------------------------------------
// Augmentation and mitigation studies on a fixed model

inline std::vector<double> null_fractions(const std::vector<double>& deltas, int repeats) {
  std::vector<double> out;
  for (double d : deltas) out.push_back(any_of(fp_rate_closed_form(d), repeats));
  return out;
}

inline ExperimentRun run_augmentation_study(const Outpainter& outpainter, const imgdata::CaptionedDataset& ds,
                                            const EvalConfig& ecfg,
                                            const std::vector<imgdata::QueryTransform>& transforms) {
  for (const auto& t : transforms) t.validate();
  const auto queries = queries_from_dataset(ds);
  ExperimentRun run;
  run.name = "augmentation";
  run.config = {{"evaluation", eval_config_to_json(ecfg, *ds.pattern)}};
  json names = json::array();
  for (const auto& t : transforms) names.push_back(t.name());
  run.config["transforms"] = names;
  std::vector<imgdata::QueryTransform> arms{imgdata::QueryTransform{}};
  arms.insert(arms.end(), transforms.begin(), transforms.end());
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const std::string name = i == 0 ? "baseline" : arms[i].name();
    run.arms.push_back(run_arm(name, static_cast<double>(i), [&] {
      EvalConfig c = ecfg;
      c.query_transform = arms[i];
      auto rep = evaluate_queries(outpainter, queries, *ds.pattern, c);
      auto chance = null_fractions(rep.deltas, c.repeats);
      Arm a = arm_from_report("", 0, std::move(rep), chance);
      a.params = {{"transform", arms[i].name()}};
      return a;
    }));
  }
  run.baseline = 0;
  return run;
}

enum class MitigationKind { gni, rt, cwr, rna };

struct Mitigation {
  MitigationKind kind = MitigationKind::gni;
  double strength = 0.0;  // GNI magnitude or caption iterations

  std::string name() const {
    switch (kind) {
      case MitigationKind::gni: return "gni" + format_number(strength);
      case MitigationKind::rt: return "rt" + format_number(strength);
      case MitigationKind::cwr: return "cwr" + format_number(strength);
      case MitigationKind::rna: return "rna" + format_number(strength);
    }
    return "";
  }

  ConditionPerturbation perturbation() const {
    ConditionPerturbation p;
    if (!(strength >= 0.0)) throw ConfigError("mitigation strength must be >= 0");
    if (kind == MitigationKind::gni) {
      p.gni_magnitude = strength;
      return p;
    }
    if (strength != std::floor(strength)) throw ConfigError("caption iterations must be an integer");
    p.caption_iterations = static_cast<int>(strength);
    p.caption_method = kind == MitigationKind::rt    ? captions::CaptionMethod::rt
                       : kind == MitigationKind::cwr ? captions::CaptionMethod::cwr
                                                     : captions::CaptionMethod::rna;
    return p;
  }
};

// "gni:0.1", "rt:2", "cwr:1", "rna:3"; a bare "gni" uses the default magnitude.
inline Mitigation parse_mitigation(const std::string& s) {
  const auto colon = s.find(':');
  const std::string head = s.substr(0, colon);
  Mitigation m;
  if (head == "gni") m.kind = MitigationKind::gni;
  else if (head == "rt") m.kind = MitigationKind::rt;
  else if (head == "cwr") m.kind = MitigationKind::cwr;
  else if (head == "rna") m.kind = MitigationKind::rna;
  else throw ConfigError("unknown mitigation method '" + head + "' (expected gni, rt, cwr, rna)");
  if (colon == std::string::npos) {
    m.strength = m.kind == MitigationKind::gni ? diffusion::kDefaultGniMagnitude : 1.0;
  } else {
    try {
      std::size_t used = 0;
      m.strength = std::stod(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw ConfigError("bad mitigation strength in '" + s + "'");
    }
  }
  (void)m.perturbation();
  return m;
}

inline ExperimentRun run_mitigation_study(const Outpainter& outpainter, const imgdata::CaptionedDataset& ds,
                                          const EvalConfig& ecfg, const std::vector<Mitigation>& methods) {
  for (const auto& m : methods) (void)m.perturbation();
  const auto queries = queries_from_dataset(ds);
  ExperimentRun run;
  run.name = "mitigation";
  run.config = {{"evaluation", eval_config_to_json(ecfg, *ds.pattern)}};
  json names = json::array();
  for (const auto& m : methods) names.push_back(m.name());
  run.config["methods"] = names;
  auto eval_arm = [&](const std::string& name, double x, const ConditionPerturbation& p) {
    return run_arm(name, x, [&] {
      EvalConfig c = ecfg;
      c.perturbation = p;
      auto rep = evaluate_queries(outpainter, queries, *ds.pattern, c);
      auto chance = null_fractions(rep.deltas, c.repeats);
      return arm_from_report("", 0, std::move(rep), chance);
    });
  };
  run.arms.push_back(eval_arm("baseline", 0.0, ecfg.perturbation));
  for (const auto& m : methods) {
    run.arms.push_back(eval_arm(m.name(), m.strength, m.perturbation()));
    run.arms.back().params = {{"method", m.name()}, {"strength", m.strength}};
  }
  run.baseline = 0;
  return run;
}

// ---------------------------------------------------------------------------
// Ablations: one model per pattern configuration

enum class AblationKind { thickness, placement, color };

inline AblationKind parse_ablation(const std::string& s) {
  if (s == "thickness") return AblationKind::thickness;
  if (s == "placement") return AblationKind::placement;
  if (s == "color") return AblationKind::color;
  throw ConfigError("unknown ablation '" + s + "' (expected thickness, placement, color)");
}

// Mean over every trial of max - min across the predicted key's channels.
inline double channel_spread(const MemorizationReport& rep) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& row : rep.rows)
    for (const auto& k : row.trial_keys) {
      if (k.components.empty()) continue;
      const auto [lo, hi] = std::minmax_element(k.components.begin(), k.components.end());
      acc += *hi - *lo;
      ++n;
    }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

inline ExperimentRun run_ablation(AblationKind kind, const std::vector<PatternSpec>& configs,
                                  const imgdata::CaptionedDataset& base, std::uint64_t key_seed,
                                  const diffusion::TrainConfig& tc, const ModelSpec& ms, const EvalConfig& ecfg,
                                  const outpaint::OutpaintConfig& ocfg) {
  if (configs.empty()) throw ConfigError("ablation needs at least one pattern configuration");
  ExperimentRun run;
  run.name = kind == AblationKind::thickness ? "ablation-thickness"
             : kind == AblationKind::placement ? "ablation-placement"
                                               : "ablation-color";
  json cfgs = json::array();
  for (const auto& p : configs) cfgs.push_back(imgdata::pattern_to_json(p));
  run.config = {{"patterns", cfgs},
                {"key_seed", key_seed},
                {"train", diffusion::train_config_to_json(tc)},
                {"model", model_spec_to_json(ms)}};
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const PatternSpec& spec = configs[i];
    const std::string name = std::string(to_string(spec.placement)) + "-p" + std::to_string(spec.thickness) + "-" +
                             to_string(spec.color_mode);
    const double x = kind == AblationKind::thickness ? spec.thickness : static_cast<double>(i);
    run.arms.push_back(run_arm(name, x, [&] {
      const auto ds = imgdata::augment_dataset(base, spec, key_seed);
      const auto model = train_model(ds, tc, ms);
      DiffusionOutpainter op(*model, schedule_for(tc), ocfg);
      auto rep = evaluate_model(op, ds, ecfg);
      auto chance = null_fractions(rep.deltas, ecfg.repeats);
      const double spread = channel_spread(rep);
      Arm a = arm_from_report("", 0, std::move(rep), chance);
      a.params = imgdata::pattern_to_json(spec);
      if (spec.color_mode == ColorMode::rgb) a.extra["channel_spread"] = spread;
      return a;
    }));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Metric pathologies

struct PathologyFixture {
  std::vector<double> dist_a;  // similarities
  std::vector<double> dist_b;
  json demonstration;
};

// Two similarity samples of size 100 sharing their 95 lowest values; a's top
// five sit in [0.97, 0.999], b's in [0.905, 0.945]. Nearest-rank 95th
// percentiles coincide, 96th percentiles and counts at delta = 0.05 differ.
inline PathologyFixture percentile_pathology_fixture(std::uint64_t seed) {
  Rng rng = derive_rng(seed, "pathology");
  std::vector<double> shared(95);
  for (auto& v : shared) v = 0.2 + 0.69 * uniform01(rng);
  PathologyFixture f;
  f.dist_a = shared;
  f.dist_b = shared;
  for (int i = 0; i < 5; ++i) {
    f.dist_a.push_back(0.97 + 0.029 * uniform01(rng));
    f.dist_b.push_back(0.905 + 0.04 * uniform01(rng));
  }
  std::shuffle(f.dist_a.begin(), f.dist_a.end(), rng);
  std::shuffle(f.dist_b.begin(), f.dist_b.end(), rng);
  const metrics::ThresholdSet th;
  const auto ra = metrics::make_score_report("similarity", metrics::ScoreKind::similarity, f.dist_a, th);
  const auto rb = metrics::make_score_report("similarity", metrics::ScoreKind::similarity, f.dist_b, th);
  f.demonstration = {{"p95_a", metrics::score_percentile(f.dist_a, 0.95)},
                     {"p95_b", metrics::score_percentile(f.dist_b, 0.95)},
                     {"p96_a", metrics::score_percentile(f.dist_a, 0.96)},
                     {"p96_b", metrics::score_percentile(f.dist_b, 0.96)},
                     {"report_a", ra.to_json()},
                     {"report_b", rb.to_json()}};
  return f;
}

struct MonochromeFixture {
  std::vector<imgdata::DatasetItem> dataset;
  Image gen_mono;
  Image gen_textured;
  json demonstration;
};

// 30 near-solid gray images plus 70 textured ones. Neither generation is in
// the training set; the gray one still scores a far lower modified l2.
inline MonochromeFixture monochrome_bias_fixture(std::uint64_t seed, int size = 16) {
  Rng rng = derive_rng(seed, "monochrome");
  auto near_solid = [&](double level) {
    Image img(size, size, 3);
    for (auto& v : img.pixels) v = std::clamp(level + 0.01 * standard_normal(rng), 0.0, 1.0);
    return img;
  };
  auto textured = [&] {
    Image img(size, size, 3);
    const double fx = 0.2 + 0.8 * uniform01(rng), fy = 0.2 + 0.8 * uniform01(rng);
    const double phase = 6.283185307179586 * uniform01(rng);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.at(c, y, x) = std::clamp(
              0.5 + 0.3 * std::sin(fx * x + fy * y + phase + c) + 0.15 * standard_normal(rng), 0.0, 1.0);
    return img;
  };
  MonochromeFixture f;
  char id[32];
  for (int i = 0; i < 30; ++i) {
    std::snprintf(id, sizeof id, "mono%03d", i);
    f.dataset.push_back({id, near_solid(0.2 + 0.6 * i / 29.0), "solid", 0, ""});
  }
  for (int i = 0; i < 70; ++i) {
    std::snprintf(id, sizeof id, "tex%03d", i);
    f.dataset.push_back({id, textured(), "texture", 1, ""});
  }
  // halfway between two training levels
  f.gen_mono = near_solid(0.2 + 0.6 * 14.5 / 29.0);
  f.gen_textured = textured();
  auto describe = [&](const Image& g) {
    const auto nn = metrics::nearest_neighbors(g, f.dataset, 1);
    return json{{"nearest", nn.front().id},
                {"l2", nn.front().distance},
                {"modified_l2", metrics::modified_l2(g, f.dataset)},
                {"patched_modified_l2", metrics::patched_modified_l2(g, f.dataset)},
                {"patched_modified_l2_max_of_min",
                 metrics::patched_modified_l2(g, f.dataset, {}, metrics::kDefaultNeighbors, metrics::kDefaultAlpha,
                                              metrics::PatchAggregation::max_of_min)}};
  };
  f.demonstration = {{"mono", describe(f.gen_mono)}, {"textured", describe(f.gen_textured)}};
  return f;
}

// ---------------------------------------------------------------------------
// Oracle calibration

struct CalibrationConfig {
  int queries = 5000;
  int repeats = 1;
  int base_size = 8;
  std::uint64_t seed = 0;
  metrics::ThresholdSet thresholds;
};

// Unmemorized oracle through the full evaluation path: eidetic fractions
// against the chance baselines, with z-scores.
inline ExperimentRun run_calibration(const CalibrationConfig& cfg, int workers = 1) {
  if (cfg.queries < 1) throw ConfigError("calibration needs at least one query");
  imgdata::SyntheticConfig sc;
  sc.count = cfg.queries;
  sc.base_size = cfg.base_size;
  sc.seed = derive_seed(cfg.seed, "calibration-data");
  PatternSpec spec;
  const auto ds = imgdata::augment_dataset(imgdata::gen_synthetic_dataset(sc), spec, derive_seed(cfg.seed, "keys"));
  UnmemorizedOracle oracle;
  EvalConfig ec;
  ec.thresholds = cfg.thresholds;
  ec.repeats = cfg.repeats;
  ec.seed = cfg.seed;
  ec.workers = workers;
  auto rep = evaluate_model(oracle, ds, ec);
  std::vector<double> grid, closed;
  json z = json::array();
  for (std::size_t i = 0; i < rep.deltas.size(); ++i) {
    closed.push_back(any_of(fp_rate_closed_form(rep.deltas[i]), cfg.repeats));
    grid.push_back(any_of(fp_rate_grid(rep.deltas[i]), cfg.repeats));
    const double n = static_cast<double>(rep.size());
    const double se = std::sqrt(grid[i] * (1 - grid[i]) / n);
    z.push_back((rep.fraction(i) - grid[i]) / se);
  }
  ExperimentRun run;
  run.name = "calibrate";
  run.config = {{"queries", cfg.queries}, {"repeats", cfg.repeats}, {"base_size", cfg.base_size}, {"seed", cfg.seed},
                {"thresholds", cfg.thresholds.deltas}};
  Arm a = arm_from_report("unmemorized-oracle", 0, std::move(rep), grid);
  a.extra = {{"chance_fraction_closed_form", closed}, {"z_vs_grid", z}};
  run.arms.push_back(std::move(a));
  return run;
}

}  // namespace solidmark::experiments
