#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <type_traits>
#include <vector>

namespace solidmark {

using Rng = std::mt19937_64;

// Builds an engine whose stream is a pure function of (seed, tag, index...).
// std::seed_seq gives a portable mixing of the words, unlike std::hash.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag = {},
                      std::initializer_list<std::uint64_t> extra = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(4 + tag.size() + 2 * extra.size());
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  words.push_back(static_cast<std::uint32_t>(tag.size()));
  for (unsigned char ch : tag) words.push_back(ch);
  for (std::uint64_t e : extra) {
    words.push_back(static_cast<std::uint32_t>(e));
    words.push_back(static_cast<std::uint32_t>(e >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Derives a child seed from a parent seed and a label; used to hand
// independent streams to sub-components.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::initializer_list<std::uint64_t> extra = {}) {
  Rng rng = derive_rng(seed, tag, extra);
  return rng();
}

// Uniform double in [0, 1) built from 53 random bits; independent of the
// standard library's distribution implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  // inclusive range; modulo bias is below 2^-40 for the ranges used here
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(rng() % span);
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

template <class Span>
void fill_normal(Rng& rng, Span&& out, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out) v = static_cast<std::remove_reference_t<decltype(v)>>(dist(rng));
}

}  // namespace solidmark
