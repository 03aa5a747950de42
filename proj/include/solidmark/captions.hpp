#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "solidmark/error.hpp"
#include "solidmark/random.hpp"

// Caption rewriting used by inference-time mitigations: random token
// replacement and addition (rt), caption word repetition (cwr), random
// number addition (rna).
namespace solidmark::captions {

enum class CaptionMethod { none, rt, cwr, rna };

inline std::string to_string(CaptionMethod m) {
  switch (m) {
    case CaptionMethod::none: return "none";
    case CaptionMethod::rt: return "rt";
    case CaptionMethod::cwr: return "cwr";
    case CaptionMethod::rna: return "rna";
  }
  return "none";
}

inline CaptionMethod parse_method(std::string_view s) {
  if (s == "none") return CaptionMethod::none;
  if (s == "rt") return CaptionMethod::rt;
  if (s == "cwr") return CaptionMethod::cwr;
  if (s == "rna") return CaptionMethod::rna;
  throw ConfigError("unknown caption method '" + std::string(s) + "' (expected none, rt, cwr, rna)");
}

// Replacement vocabulary for rt.
inline constexpr std::array<std::string_view, 24> kVocabulary = {
    "apple", "river",  "lamp",   "orange", "window", "cloud",  "stone",  "paper",
    "violin", "garden", "mirror", "candle", "forest", "engine", "bottle", "planet",
    "carpet", "ladder", "pencil", "harbor", "tiger",  "silver", "meadow", "castle"};

inline constexpr double kReplaceProbability = 0.1;
inline constexpr int kMaxRandomNumber = 1'000'000;

inline std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> out;
  std::istringstream in{std::string(caption)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

inline std::string detokenize(const std::vector<std::string>& toks) {
  std::string out;
  for (const auto& t : toks) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

namespace detail {
inline void insert_at_random(std::vector<std::string>& toks, std::string word, Rng& rng) {
  const auto pos = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(toks.size())));
  toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(pos), std::move(word));
}

inline std::string random_word(Rng& rng) {
  return std::string(kVocabulary[static_cast<std::size_t>(
      uniform_int(rng, 0, static_cast<int>(kVocabulary.size()) - 1))]);
}
}  // namespace detail

// One iteration each: rt replaces every token with probability 0.1 and adds
// one random word; cwr copies a random word to one extra position; rna adds
// an integer from [0, 1e6].
inline std::string perturb_caption(std::string_view caption, CaptionMethod method, int iterations,
                                   std::uint64_t seed) {
  if (iterations < 0) throw ConfigError("caption iterations must be >= 0");
  auto toks = tokenize(caption);
  Rng rng = derive_rng(seed, "caption:" + to_string(method));
  for (int it = 0; it < iterations; ++it) {
    switch (method) {
      case CaptionMethod::none: return std::string(caption);
      case CaptionMethod::rt:
        for (auto& t : toks)
          if (uniform01(rng) < kReplaceProbability) t = detail::random_word(rng);
        detail::insert_at_random(toks, detail::random_word(rng), rng);
        break;
      case CaptionMethod::cwr:
        if (toks.empty()) break;
        detail::insert_at_random(
            toks, toks[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(toks.size()) - 1))],
            rng);
        break;
      case CaptionMethod::rna:
        detail::insert_at_random(toks, std::to_string(uniform_int(rng, 0, kMaxRandomNumber)), rng);
        break;
    }
  }
  return iterations == 0 ? std::string(caption) : detokenize(toks);
}

}  // namespace solidmark::captions
