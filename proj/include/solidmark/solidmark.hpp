#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "solidmark/captions.hpp"
#include "solidmark/csv.hpp"
#include "solidmark/diffusion.hpp"
#include "solidmark/imgdata.hpp"
#include "solidmark/metrics.hpp"
#include "solidmark/outpaint.hpp"

namespace solidmark {

using json = nlohmann::json;

// Anything that can fill the masked region of a query. `query` has augmented
// dims with the pattern region zeroed; `cond` is the (possibly perturbed)
// condition embedding.
class Outpainter {
 public:
  virtual ~Outpainter() = default;
  virtual Image outpaint(const Image& query, const Mask& mask, std::span<const float> cond,
                         std::uint64_t seed) const = 0;
  // False when the condition embedding is ignored; evaluation then skips it.
  virtual bool uses_condition() const { return true; }
};

enum class OutpaintVariant { pixel, latent };

inline OutpaintVariant parse_variant(const std::string& s) {
  if (s == "pixel") return OutpaintVariant::pixel;
  if (s == "latent") return OutpaintVariant::latent;
  throw ConfigError("variant must be pixel or latent, got '" + s + "'");
}

// Diffusion-model outpainter. The latent variant uses `autoencoder`
// (identity when none is given).
class DiffusionOutpainter final : public Outpainter {
 public:
  DiffusionOutpainter(const diffusion::Denoiser& model, diffusion::NoiseSchedule schedule,
                      outpaint::OutpaintConfig cfg, OutpaintVariant variant = OutpaintVariant::pixel,
                      const outpaint::Autoencoder* autoencoder = nullptr)
      : model_(model), schedule_(std::move(schedule)), cfg_(cfg), variant_(variant), ae_(autoencoder) {
    cfg_.validate();
  }

  Image outpaint(const Image& query, const Mask& mask, std::span<const float> cond,
                 std::uint64_t seed) const override {
    outpaint::OutpaintConfig cfg = cfg_;
    cfg.seed = seed;
    if (variant_ == OutpaintVariant::pixel)
      return outpaint::outpaint_pixel(model_, query, cond, mask, schedule_, cfg);
    static const outpaint::IdentityAutoencoder identity;
    return outpaint::outpaint_latent(model_, ae_ ? *ae_ : identity, query, cond, mask, schedule_, cfg);
  }
  bool uses_condition() const override { return model_.conditional(); }

 private:
  const diffusion::Denoiser& model_;
  diffusion::NoiseSchedule schedule_;
  outpaint::OutpaintConfig cfg_;
  OutpaintVariant variant_;
  const outpaint::Autoencoder* ae_;
};

// Evaluation-time changes to the conditioning: caption rewriting before the
// embedder, then Gaussian noise on the embedding.
struct ConditionPerturbation {
  captions::CaptionMethod caption_method = captions::CaptionMethod::none;
  int caption_iterations = 0;
  double gni_magnitude = 0.0;

  bool active() const {
    return (caption_method != captions::CaptionMethod::none && caption_iterations > 0) ||
           gni_magnitude > 0.0;
  }
};

struct EvalConfig {
  metrics::ThresholdSet thresholds;
  std::optional<int> subset_size;  // whole dataset when unset
  int repeats = 1;                 // r
  std::uint64_t seed = 0;
  imgdata::QueryTransform query_transform;
  ConditionPerturbation perturbation;
  int workers = 1;

  void validate() const {
    thresholds.validate();
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    if (subset_size && *subset_size < 1) throw ConfigError("subset size must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    query_transform.validate();
  }
};

// One training image under evaluation. `keys` holds every key the image was
// trained with (more than one for duplicates with independent keys).
struct ImageQuery {
  std::string id;
  Image augmented;
  std::string caption;
  int label = 0;
  std::vector<Key> keys;
};

inline std::uint64_t trial_seed(std::uint64_t seed, const std::string& id, int trial) {
  return derive_seed(seed, "trial:" + id, {static_cast<std::uint64_t>(trial)});
}

inline std::vector<float> condition_for(const ImageQuery& q, const ConditionPerturbation& p,
                                        std::uint64_t seed, bool conditional = true) {
  if (!conditional) return {};
  std::string caption = q.caption;
  if (p.caption_method != captions::CaptionMethod::none && p.caption_iterations > 0)
    caption = captions::perturb_caption(caption, p.caption_method, p.caption_iterations,
                                        derive_seed(seed, "caption"));
  auto emb = diffusion::embed_condition(caption);
  emb = diffusion::perturb_condition_gni(emb, p.gni_magnitude, derive_seed(seed, "gni"));
  return emb.values;
}

struct TrialResult {
  Key predicted;
  double distance = 0.0;  // min over the image's keys
};

// Builds the outpainting query: optional interior transform, then the
// pattern region zeroed.
inline Image make_query(const ImageQuery& q, const PatternSpec& spec, const Mask& mask,
                        const imgdata::QueryTransform& t, std::uint64_t seed) {
  Image src = q.augmented;
  if (t.kind != imgdata::TransformKind::identity)
    src = imgdata::augment_augmented(q.augmented, q.keys.front(), spec, t, derive_seed(seed, "augment"));
  return imgdata::blank_pattern(src, mask);
}

// The outpainted image of one trial; a pure function of (cfg.seed, id, trial).
inline Image trial_output(const Outpainter& outpainter, const ImageQuery& q, const PatternSpec& spec,
                          const Mask& mask, const EvalConfig& cfg, int trial) {
  const std::uint64_t seed = trial_seed(cfg.seed, q.id, trial);
  const Image query = make_query(q, spec, mask, cfg.query_transform, seed);
  const auto cond = condition_for(q, cfg.perturbation, seed, outpainter.uses_condition());
  return outpainter.outpaint(query, mask, cond, derive_seed(seed, "outpaint"));
}

inline TrialResult run_trial(const Outpainter& outpainter, const ImageQuery& q, const PatternSpec& spec,
                             const Mask& mask, const EvalConfig& cfg, int trial) {
  const Image out = trial_output(outpainter, q, spec, mask, cfg, trial);
  TrialResult r;
  r.predicted = outpaint::predicted_key(out, mask, spec.color_mode);
  r.distance = 1.0;
  for (const auto& k : q.keys) r.distance = std::min(r.distance, metrics::key_distance(r.predicted, k));
  return r;
}

struct MemorizationVerdict {
  bool memorized = false;
  std::vector<double> trials;  // key distance of every executed trial
};

// Up to r outpainting trials, stopping at the first within delta.
inline MemorizationVerdict is_image_memorized(const Outpainter& outpainter, const ImageQuery& q,
                                              double delta, const PatternSpec& spec, int repeats,
                                              std::uint64_t seed) {
  if (q.keys.empty()) throw IntegrityError("no key recorded for image '" + q.id + "'");
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  EvalConfig cfg;
  cfg.seed = seed;
  const Mask mask = imgdata::build_pattern_mask(spec, q.augmented.height, q.augmented.width);
  MemorizationVerdict v;
  for (int i = 0; i < repeats; ++i) {
    const auto r = run_trial(outpainter, q, spec, mask, cfg, i);
    v.trials.push_back(r.distance);
    if (r.distance <= delta) {
      v.memorized = true;
      break;
    }
  }
  return v;
}

// Minimum key distance over r trials; lower means more memorized.
inline double per_image_score(const Outpainter& outpainter, const ImageQuery& q, const PatternSpec& spec,
                              int repeats, std::uint64_t seed) {
  if (q.keys.empty()) throw IntegrityError("no key recorded for image '" + q.id + "'");
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  EvalConfig cfg;
  cfg.seed = seed;
  const Mask mask = imgdata::build_pattern_mask(spec, q.augmented.height, q.augmented.width);
  double best = 1.0;
  for (int i = 0; i < repeats; ++i)
    best = std::min(best, run_trial(outpainter, q, spec, mask, cfg, i).distance);
  return best;
}

// Chance that an unmemorized uniform prediction lands within delta of a
// uniform key: 2 delta - delta^2.
inline double chance_rate(double delta) {
  if (delta >= 1.0) return 1.0;
  if (delta <= 0.0) return 0.0;
  return 2.0 * delta - delta * delta;
}

// Any-of-(r * keys) chance baseline.
inline double chance_rate_any(double delta, int trials) {
  return 1.0 - std::pow(1.0 - chance_rate(delta), trials);
}

struct ReportRow {
  std::string id;
  std::vector<Key> true_keys;
  std::vector<Key> trial_keys;
  std::vector<double> trial_distances;
  double min_distance = 1.0;
};

struct MemorizationReport {
  std::vector<ReportRow> rows;  // sorted by id
  std::vector<double> deltas;
  std::vector<std::size_t> counts;
  std::vector<double> chance_baseline;  // expected fraction under the null, per delta
  std::uint64_t seed = 0;
  int repeats = 1;
  json config;

  std::size_t size() const { return rows.size(); }

  std::vector<double> min_distances() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.min_distance);
    return v;
  }

  // Counts recomputed from rows; equals `counts` for a consistent report.
  std::vector<std::size_t> recount() const {
    const auto d = min_distances();
    std::vector<std::size_t> out;
    for (double delta : deltas) out.push_back(metrics::count_eidetic(d, delta));
    return out;
  }

  double fraction(std::size_t i) const {
    return rows.empty() ? 0.0 : static_cast<double>(counts.at(i)) / static_cast<double>(rows.size());
  }
};

inline std::string key_field(const Key& k) {
  std::vector<std::string> parts;
  for (double v : k.components) parts.push_back(format_number(v));
  return join(parts, ";");
}

inline std::string report_csv(const MemorizationReport& r) {
  std::string out = csv_row({"id", "true_keys", "trial_keys", "trial_distances", "min_distance"});
  for (const auto& row : r.rows) {
    std::vector<std::string> tk, pk, dist;
    for (const auto& k : row.true_keys) tk.push_back(key_field(k));
    for (const auto& k : row.trial_keys) pk.push_back(key_field(k));
    for (double d : row.trial_distances) dist.push_back(format_number(d));
    out += csv_row({row.id, join(tk, "|"), join(pk, "|"), join(dist, "|"), format_number(row.min_distance)});
  }
  return out;
}

inline json report_summary(const MemorizationReport& r) {
  json per_delta = json::array();
  for (std::size_t i = 0; i < r.deltas.size(); ++i) {
    const double n = static_cast<double>(r.size());
    const double p = r.chance_baseline[i];
    per_delta.push_back({{"delta", r.deltas[i]},
                         {"count", r.counts[i]},
                         {"fraction", r.fraction(i)},
                         {"chance_fraction", p},
                         {"chance_count", p * n},
                         {"chance_stderr_count", std::sqrt(p * (1 - p) * n)}});
  }
  return {{"images", r.size()}, {"repeats", r.repeats}, {"seed", r.seed},
          {"thresholds", per_delta}, {"config", r.config}};
}

// Parses the per-image CSV written by report_csv back into rows.
inline std::vector<ReportRow> parse_report_csv(std::string_view text) {
  const auto records = parse_csv(text);
  if (records.empty() || records.front().size() != 5 || records.front()[0] != "id")
    throw ParseError("not a memorization report CSV");
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    std::string cur;
    for (char c : s) {
      if (c == sep) {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  auto parse_key = [&](const std::string& s) {
    Key k;
    for (const auto& p : split(s, ';')) k.components.push_back(std::stod(p));
    return k;
  };
  std::vector<ReportRow> rows;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.size() != 5) throw ParseError("report row " + std::to_string(i) + " has " +
                                          std::to_string(rec.size()) + " fields");
    try {
      ReportRow row;
      row.id = rec[0];
      for (const auto& k : split(rec[1], '|')) row.true_keys.push_back(parse_key(k));
      for (const auto& k : split(rec[2], '|')) row.trial_keys.push_back(parse_key(k));
      for (const auto& d : split(rec[3], '|')) row.trial_distances.push_back(std::stod(d));
      row.min_distance = std::stod(rec[4]);
      rows.push_back(std::move(row));
    } catch (const std::logic_error&) {
      throw ParseError("malformed number in report row " + std::to_string(i));
    }
  }
  return rows;
}

// Evaluation queries for a pattern-augmented dataset; duplicates are folded
// into their original with every key attached when `merge_duplicates` is set.
inline std::vector<ImageQuery> queries_from_dataset(const imgdata::CaptionedDataset& ds,
                                                    bool merge_duplicates = false) {
  if (!ds.pattern) throw ConfigError("dataset is not pattern-augmented");
  if (!ds.keymap) throw KeymapAbsentError("keymap absent for an augmented dataset");
  std::vector<ImageQuery> out;
  for (const auto& it : ds.items) {
    if (merge_duplicates && !it.provenance.empty()) continue;
    ImageQuery q{it.id, it.image, it.caption, it.label, {}};
    if (merge_duplicates) {
      for (const auto& id : imgdata::ids_with_provenance(ds, it.id)) q.keys.push_back(ds.keymap->at(id));
    } else {
      q.keys.push_back(ds.keymap->at(it.id));
    }
    out.push_back(std::move(q));
  }
  return out;
}

// Deterministic size-n subset without replacement (partial Fisher-Yates).
inline std::vector<std::size_t> sample_subset(std::size_t population, std::size_t n, std::uint64_t seed) {
  if (n > population)
    throw ConfigError("subset size " + std::to_string(n) + " exceeds dataset size " + std::to_string(population));
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = derive_rng(seed, "subset");
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (population - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

// Runs `fn(i)` for i in [0, n) on `workers` threads; rethrows the first error.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t w = 0; w < count; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline json eval_config_to_json(const EvalConfig& c, const PatternSpec& spec) {
  return {{"thresholds", c.thresholds.deltas},
          {"subset_size", c.subset_size ? json(*c.subset_size) : json(nullptr)},
          {"repeats", c.repeats},
          {"seed", c.seed},
          {"pattern", imgdata::pattern_to_json(spec)},
          {"query_transform", c.query_transform.name()},
          {"caption_method", captions::to_string(c.perturbation.caption_method)},
          {"caption_iterations", c.perturbation.caption_iterations},
          {"gni_magnitude", c.perturbation.gni_magnitude}};
}

// Evaluates a subset of queries: every image gets all r trials so the report
// answers every threshold at once (any-of-r semantics per threshold).
inline MemorizationReport evaluate_queries(const Outpainter& outpainter, const std::vector<ImageQuery>& queries,
                                           const PatternSpec& spec, const EvalConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.subset_size ? static_cast<std::size_t>(*cfg.subset_size) : queries.size();
  const auto subset = sample_subset(queries.size(), n, cfg.seed);
  std::vector<ReportRow> rows(subset.size());
  parallel_for(subset.size(), cfg.workers, [&](std::size_t i) {
    const ImageQuery& q = queries[subset[i]];
    if (q.keys.empty()) throw IntegrityError("no key recorded for image '" + q.id + "'");
    const Mask mask = imgdata::build_pattern_mask(spec, q.augmented.height, q.augmented.width);
    ReportRow row;
    row.id = q.id;
    row.true_keys = q.keys;
    for (int t = 0; t < cfg.repeats; ++t) {
      const auto r = run_trial(outpainter, q, spec, mask, cfg, t);
      row.trial_keys.push_back(r.predicted);
      row.trial_distances.push_back(r.distance);
      row.min_distance = std::min(row.min_distance, r.distance);
    }
    rows[i] = std::move(row);
  });
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].id == rows[i - 1].id) throw IntegrityError("duplicate id in evaluation subset");

  MemorizationReport rep;
  rep.rows = std::move(rows);
  rep.deltas = cfg.thresholds.deltas;
  rep.counts = rep.recount();
  rep.seed = cfg.seed;
  rep.repeats = cfg.repeats;
  std::size_t keys = 1;
  for (const auto& q : queries) keys = std::max(keys, q.keys.size());
  for (double d : rep.deltas)
    rep.chance_baseline.push_back(chance_rate_any(d, cfg.repeats * static_cast<int>(keys)));
  rep.config = eval_config_to_json(cfg, spec);
  return rep;
}

inline MemorizationReport evaluate_model(const Outpainter& outpainter, const imgdata::CaptionedDataset& ds,
                                         const EvalConfig& cfg) {
  const auto queries = queries_from_dataset(ds);
  return evaluate_queries(outpainter, queries, *ds.pattern, cfg);
}

}  // namespace solidmark
