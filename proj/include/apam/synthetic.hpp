#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "apam/data.hpp"
#include "apam/errors.hpp"
#include "apam/random.hpp"

namespace apam::data {

/// Cluster-vocabulary text generator: each class owns a small word cluster and
/// all classes share a larger background vocabulary. A token is drawn from the
/// document's class cluster with probability `signal`, from a neighbouring
/// class's cluster with probability `confusion`, and from the background otherwise.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t per_class = 1000;
  std::size_t cluster_words = 30;
  std::size_t background_words = 600;
  double signal = 0.2;
  double confusion = 0.05;
  std::size_t min_len = 8;
  std::size_t max_len = 20;
  std::uint64_t seed = 1;

  void validate() const {
    if (classes == 0 || per_class == 0) throw ConfigError("synthetic: classes and per_class must be positive");
    if (cluster_words == 0 || background_words == 0) throw ConfigError("synthetic: vocabularies must be non-empty");
    if (!(signal >= 0 && confusion >= 0 && signal + confusion <= 1)) {
      throw ConfigError("synthetic: signal + confusion must lie in [0,1]");
    }
    if (min_len == 0 || min_len > max_len) throw ConfigError("synthetic: need 0 < min_len <= max_len");
  }
};

namespace detail {

/// Pronounceable pseudo-word for a vocabulary slot.
inline std::string pseudo_word(std::uint64_t key, std::size_t syllables) {
  static constexpr const char* kOnset[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
                                           "br", "st", "tr", "pl", "gr", "sh"};
  static constexpr const char* kVowel[] = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    const std::uint64_t h = mix_seed(key, {s});
    w += kOnset[h % 20];
    w += kVowel[(h >> 8) % 8];
    if ((h >> 16) % 3 == 0) w += kOnset[(h >> 24) % 14];
  }
  return w;
}

/// Zipf(1) index in [0, n) from the cumulative table.
inline std::size_t zipf_draw(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = std::uniform_real_distribution<double>(0.0, cdf.back())(rng);
  return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

inline std::vector<double> zipf_cdf(std::size_t n) {
  std::vector<double> cdf(n);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) cdf[i] = acc += 1.0 / double(i + 1);
  return cdf;
}

}  // namespace detail

/// Balanced labelled corpus of classes * per_class examples; ids are 0..N-1.
[[nodiscard]] inline Dataset make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  // distinct word strings: cluster words get three syllables, background two or three
  std::vector<std::vector<std::string>> clusters(spec.classes);
  std::vector<std::string> background;
  std::unordered_set<std::string> used;
  auto fresh = [&](std::uint64_t key, std::size_t syllables) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      auto w = detail::pseudo_word(mix_seed(spec.seed, {key, attempt}), syllables);
      if (used.insert(w).second) return w;
    }
  };
  for (std::size_t c = 0; c < spec.classes; ++c)
    for (std::size_t j = 0; j < spec.cluster_words; ++j) clusters[c].push_back(fresh(1000003ULL * (c + 1) + j, 3));
  for (std::size_t j = 0; j < spec.background_words; ++j) background.push_back(fresh(7 + j, 2 + j % 2));

  const auto bg_cdf = detail::zipf_cdf(spec.background_words);
  Dataset ds;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    ds.classes.push_back(std::string("class_") + (c < 10 ? "0" : "") + std::to_string(c));
  }
  std::uniform_int_distribution<std::size_t> len(spec.min_len, spec.max_len);
  std::uniform_int_distribution<std::size_t> pick(0, spec.cluster_words - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Example e;
      e.id = c * spec.per_class + i;
      std::mt19937_64 rng(mix_seed(spec.seed, {0xD0C, e.id}));
      const std::size_t n = len(rng);
      for (std::size_t k = 0; k < n; ++k) {
        const double r = u(rng);
        const std::string* w;
        if (r < spec.signal) {
          w = &clusters[c][pick(rng)];
        } else if (r < spec.signal + spec.confusion && spec.classes > 1) {
          w = &clusters[(c + 1) % spec.classes][pick(rng)];
        } else {
          w = &background[detail::zipf_draw(rng, bg_cdf)];
        }
        if (k) e.text += ' ';
        e.text += *w;
      }
      e.label = e.original_label = c;
      ds.examples.push_back(std::move(e));
    }
  }
  return ds;
}

}  // namespace apam::data
