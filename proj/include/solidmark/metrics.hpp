#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <functional>
#include <limits>
#include <memory>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "solidmark/csv.hpp"
#include "solidmark/error.hpp"
#include "solidmark/image.hpp"

namespace solidmark::metrics {

using json = nlohmann::json;

// sqrt(sum (a_i - b_i)^2 / d) over all d pixel-channel entries.
inline double l2_normalized(const Image& a, const Image& b) {
  require_same_dims(a, b, "l2_normalized");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

// Anything with `id` and `image` members can be searched.
template <class T>
concept NamedImage = requires(const T& t) {
  { t.id } -> std::convertible_to<std::string>;
  { t.image } -> std::convertible_to<const Image&>;
};

template <class R>
concept ImageCollection = std::ranges::forward_range<R> && NamedImage<std::ranges::range_value_t<R>>;

struct Neighbor {
  std::string id;
  double distance = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// n nearest training images sorted by ascending distance, ties by id.
using NeighborSet = std::vector<Neighbor>;

using ImageMetric = std::function<double(const Image&, const Image&)>;

template <ImageCollection R, class Metric>
NeighborSet nearest_neighbors(const Image& gen, const R& dataset, int n, Metric&& metric) {
  std::vector<Neighbor> all;
  for (const auto& item : dataset) all.push_back({item.id, metric(gen, item.image)});
  if (n < 1 || static_cast<std::size_t>(n) > all.size())
    throw ConfigError("nearest_neighbors: n = " + std::to_string(n) + " with " +
                      std::to_string(all.size()) + " training images");
  auto less = [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  };
  std::partial_sort(all.begin(), all.begin() + n, all.end(), less);
  all.resize(static_cast<std::size_t>(n));
  return all;
}

template <ImageCollection R>
NeighborSet nearest_neighbors(const Image& gen, const R& dataset, int n) {
  return nearest_neighbors(gen, dataset, n, l2_normalized);
}

inline constexpr int kDefaultNeighbors = 50;
inline constexpr double kDefaultAlpha = 0.5;

// Nearest-neighbour distance over alpha times the mean distance of the
// neighbour set (which includes the nearest neighbour itself).
inline double rescale_nearest(const NeighborSet& s, double alpha) {
  if (s.empty()) throw ConfigError("empty neighbour set");
  if (!(alpha > 0)) throw ConfigError("alpha must be > 0");
  double mean = 0.0;
  for (const auto& nb : s) mean += nb.distance;
  mean /= static_cast<double>(s.size());
  if (!(mean > 0.0))
    throw DegenerateInputError("mean neighbour distance is zero: the generation duplicates all " +
                               std::to_string(s.size()) + " nearest training images");
  return s.front().distance / (alpha * mean);
}

template <ImageCollection R>
double modified_l2(const Image& gen, const R& dataset, int n = kDefaultNeighbors,
                   double alpha = kDefaultAlpha) {
  if (!(alpha > 0)) throw ConfigError("alpha must be > 0");
  return rescale_nearest(nearest_neighbors(gen, dataset, n), alpha);
}

// How per-patch distances combine into one image distance.
//  max_over_pairs: maximum l2 over every (generation patch, training patch)
//                  pair, the literal reading of the published description.
//  max_of_min:     for each generation patch take its closest training patch,
//                  then the maximum of those.
enum class PatchAggregation { max_over_pairs, max_of_min };

struct PatchGrid {
  int rows = 4;
  int cols = 4;
};

// Splits an image into grid.rows x grid.cols equal patches after
// center-cropping to the largest divisible size.
inline std::vector<Image> split_patches(const Image& img, PatchGrid grid = {}) {
  if (grid.rows < 1 || grid.cols < 1) throw ConfigError("patch grid must be positive");
  const int ph = img.height / grid.rows, pw = img.width / grid.cols;
  if (ph < 1 || pw < 1) throw DimensionError("image smaller than the patch grid");
  const int y_off = (img.height - ph * grid.rows) / 2, x_off = (img.width - pw * grid.cols) / 2;
  std::vector<Image> out;
  for (int gy = 0; gy < grid.rows; ++gy)
    for (int gx = 0; gx < grid.cols; ++gx) {
      Image p(ph, pw, img.channels);
      for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < ph; ++y)
          for (int x = 0; x < pw; ++x) p.at(c, y, x) = img.at(c, y_off + gy * ph + y, x_off + gx * pw + x);
      out.push_back(std::move(p));
    }
  return out;
}

inline double patched_l2(const Image& gen, const Image& train, PatchGrid grid = {},
                         PatchAggregation agg = PatchAggregation::max_over_pairs) {
  require_same_dims(gen, train, "patched_l2");
  const auto gp = split_patches(gen, grid);
  const auto tp = split_patches(train, grid);
  double result = 0.0;
  for (const auto& g : gp) {
    double best = agg == PatchAggregation::max_over_pairs ? 0.0 : std::numeric_limits<double>::infinity();
    for (const auto& t : tp) {
      const double d = l2_normalized(g, t);
      best = agg == PatchAggregation::max_over_pairs ? std::max(best, d) : std::min(best, d);
    }
    result = std::max(result, best);
  }
  return result;
}

template <ImageCollection R>
double patched_modified_l2(const Image& gen, const R& dataset, PatchGrid grid = {},
                           int n = kDefaultNeighbors, double alpha = kDefaultAlpha,
                           PatchAggregation agg = PatchAggregation::max_over_pairs) {
  if (!(alpha > 0)) throw ConfigError("alpha must be > 0");
  auto metric = [&](const Image& a, const Image& b) { return patched_l2(a, b, grid, agg); };
  return rescale_nearest(nearest_neighbors(gen, dataset, n, metric), alpha);
}

// ---------------------------------------------------------------------------
// Embeddings

class Embedder {
 public:
  virtual ~Embedder() = default;
  // Unit-norm descriptor of fixed dimension.
  virtual std::vector<double> embed(const Image& img) const = 0;
};

// Area-downsample to 8x8 per channel, flatten, subtract the mean, normalize.
class ToyEmbedder final : public Embedder {
 public:
  explicit ToyEmbedder(int side = 8) : side_(side) {}

  std::vector<double> embed(const Image& img) const override {
    std::vector<double> v(static_cast<std::size_t>(side_) * side_ * img.channels, 0.0);
    std::vector<double> w(v.size(), 0.0);
    for (int c = 0; c < img.channels; ++c)
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
          const int by = y * side_ / img.height, bx = x * side_ / img.width;
          const auto k = (static_cast<std::size_t>(c) * side_ + by) * side_ + bx;
          v[k] += img.at(c, y, x);
          w[k] += 1.0;
        }
    double mean = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = w[i] > 0 ? v[i] / w[i] : 0.0;
      mean += v[i];
    }
    mean /= static_cast<double>(v.size());
    double norm = 0.0;
    for (auto& x : v) {
      x -= mean;
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw EmbedderError("toy embedder: constant image has no direction");
    for (auto& x : v) x /= norm;
    return v;
  }

 private:
  int side_;
};

inline double embedding_similarity(const Image& gen, const Image& train, const Embedder& embedder) {
  const auto a = embedder.embed(gen);
  const auto b = embedder.embed(train);
  if (a.size() != b.size()) throw EmbedderError("embedding dimensions differ");
  double na = 0.0, nb = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw EmbedderError("non-finite embedding");
    na += a[i] * a[i];
    nb += b[i] * b[i];
    dot += a[i] * b[i];
  }
  if (std::abs(std::sqrt(na) - 1.0) > 1e-6 || std::abs(std::sqrt(nb) - 1.0) > 1e-6)
    throw EmbedderError("embedder output is not unit norm");
  return std::clamp(dot, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Key distance and scoring

// |k_hat - k|; for rgb keys the mean of per-channel absolute differences.
inline double key_distance(const Key& predicted, const Key& truth) {
  if (predicted.size() != truth.size() || truth.size() == 0)
    throw DimensionError("key_distance: component counts differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    acc += std::abs(predicted.components[i] - truth.components[i]);
  return acc / static_cast<double>(truth.size());
}

// Nearest-rank percentile: the ceil(q N)-th smallest value.
inline double score_percentile(std::span<const double> values, double q = 0.95) {
  if (values.empty()) throw DomainError("percentile of an empty sample");
  if (!(q > 0.0 && q <= 1.0)) throw DomainError("percentile q must be in (0, 1]");
  std::vector<double> v(values.begin(), values.end());
  const auto n = v.size();
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return v[rank - 1];
}

inline double score_max(std::span<const double> values) {
  if (values.empty()) throw DomainError("maximum of an empty sample");
  return *std::max_element(values.begin(), values.end());
}

// |{ l_i <= delta }|
inline std::size_t count_eidetic(std::span<const double> distances, double delta) {
  if (!(delta >= 0.0)) throw ConfigError("eidetic threshold must be >= 0");
  return static_cast<std::size_t>(
      std::count_if(distances.begin(), distances.end(), [delta](double d) { return d <= delta; }));
}

struct ThresholdSet {
  std::vector<double> deltas{0.1, 0.05, 0.005};

  static ThresholdSet from(std::vector<double> deltas) {
    ThresholdSet t;
    t.deltas = std::move(deltas);
    std::sort(t.deltas.begin(), t.deltas.end(), std::greater<>());
    t.deltas.erase(std::unique(t.deltas.begin(), t.deltas.end()), t.deltas.end());
    t.validate();
    return t;
  }

  void validate() const {
    if (deltas.empty()) throw ConfigError("threshold set is empty");
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (!(deltas[i] > 0.0 && deltas[i] < 1.0))
        throw ConfigError("eidetic threshold " + format_number(deltas[i]) + " outside (0, 1)");
      if (i && !(deltas[i] < deltas[i - 1])) throw ConfigError("thresholds must be strictly descending");
    }
  }
};

enum class ScoreKind { distance, similarity };

// Summary of one metric over a sample. Similarities and distances never share
// a report: eidetic counts of a similarity report are taken on 1 - s.
struct ScoreReport {
  std::string metric;
  ScoreKind kind = ScoreKind::distance;
  std::size_t sample_size = 0;
  double percentile95 = 0.0;
  double maximum = 0.0;
  std::vector<double> deltas;
  std::vector<std::size_t> eidetic_counts;

  json to_json() const {
    return {{"metric", metric},
            {"kind", kind == ScoreKind::distance ? "distance" : "similarity"},
            {"sample_size", sample_size},
            {"p95", percentile95},
            {"max", maximum},
            {"deltas", deltas},
            {"eidetic_counts", eidetic_counts}};
  }
};

inline ScoreReport make_score_report(const std::string& metric, ScoreKind kind,
                                     std::span<const double> values, const ThresholdSet& thresholds) {
  thresholds.validate();
  ScoreReport r;
  r.metric = metric;
  r.kind = kind;
  r.sample_size = values.size();
  r.percentile95 = score_percentile(values, 0.95);
  r.maximum = score_max(values);
  std::vector<double> dist(values.begin(), values.end());
  if (kind == ScoreKind::similarity)
    for (auto& v : dist) v = 1.0 - v;
  r.deltas = thresholds.deltas;
  for (double d : thresholds.deltas) r.eidetic_counts.push_back(count_eidetic(dist, d));
  return r;
}

struct DistanceRecord {
  std::string generation_id;
  std::string nearest_id;
  double value = 0.0;
  std::string metric;
};

inline const std::vector<std::string>& registered_metrics() {
  static const std::vector<std::string> names = {"l2", "modified_l2", "patched_modified_l2",
                                                 "embedding_similarity", "l_sm"};
  return names;
}

inline std::string distance_records_csv(const std::vector<DistanceRecord>& records) {
  std::string out = csv_row({"generation_id", "nearest_id", "value", "metric"});
  for (const auto& r : records) {
    if (!std::isfinite(r.value)) throw DomainError("distance record value is not finite");
    if (std::find(registered_metrics().begin(), registered_metrics().end(), r.metric) ==
        registered_metrics().end())
      throw ConfigError("unregistered metric name '" + r.metric + "'");
    out += csv_row({r.generation_id, r.nearest_id, format_number(r.value), r.metric});
  }
  return out;
}

}  // namespace solidmark::metrics
