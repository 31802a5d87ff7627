#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "apam/errors.hpp"
#include "apam/random.hpp"

namespace apam::data {

struct Example {
  std::uint64_t id = 0;
  std::string text;
  std::size_t label = 0;
  std::size_t original_label = 0;
  bool corrupted = false;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::vector<Example> examples;
  std::vector<std::string> classes;  // class id -> label string

  [[nodiscard]] std::size_t size() const noexcept { return examples.size(); }
  [[nodiscard]] std::size_t num_classes() const noexcept { return classes.size(); }

  /// Per-class counts of the observed label.
  [[nodiscard]] std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(classes.size(), 0);
    for (const auto& e : examples) c.at(e.label)++;
    return c;
  }

  [[nodiscard]] std::vector<std::string> texts() const {
    std::vector<std::string> t;
    t.reserve(examples.size());
    for (const auto& e : examples) t.push_back(e.text);
    return t;
  }

  [[nodiscard]] std::unordered_set<std::uint64_t> ids() const {
    std::unordered_set<std::uint64_t> s;
    for (const auto& e : examples) s.insert(e.id);
    return s;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// The three disjoint parts a training run consumes.
struct DatasetSplit {
  Dataset train;
  Dataset meta;
  Dataset test;
};

// ---------------------------------------------------------------------------
// JSONL ingestion / output

namespace detail {

inline std::string label_key(const nlohmann::json& v, std::size_t line, const char* field) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  throw IngestError("line " + std::to_string(line) + ": field '" + field + "' must be a string or integer");
}

}  // namespace detail

/// Reads JSONL records `{"text": str, "label": str|int}` (optionally with `id`,
/// `original_label`, `corrupted`). Labels map to contiguous ids in first-seen
/// order unless `fixed_classes` is given, in which case unknown labels are errors.
[[nodiscard]] inline Dataset ingest(const std::string& path, const std::vector<std::string>* fixed_classes = nullptr) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open dataset '" + path + "'");
  Dataset ds;
  std::unordered_map<std::string, std::size_t> index;
  if (fixed_classes) {
    ds.classes = *fixed_classes;
    for (std::size_t i = 0; i < ds.classes.size(); ++i) index.emplace(ds.classes[i], i);
  }
  auto class_id = [&](const std::string& key, std::size_t line) {
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    if (fixed_classes) throw IngestError("line " + std::to_string(line) + ": unknown label '" + key + "'");
    index.emplace(key, ds.classes.size());
    ds.classes.push_back(key);
    return ds.classes.size() - 1;
  };
  std::unordered_set<std::uint64_t> seen_ids;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (std::all_of(raw.begin(), raw.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw IngestError("line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
    }
    if (!rec.is_object()) throw IngestError("line " + std::to_string(line) + ": record is not an object");
    if (!rec.contains("text") || !rec["text"].is_string()) {
      throw IngestError("line " + std::to_string(line) + ": field 'text' missing or not a string");
    }
    if (!rec.contains("label")) throw IngestError("line " + std::to_string(line) + ": field 'label' missing");
    Example ex;
    ex.text = rec["text"].get<std::string>();
    ex.label = class_id(detail::label_key(rec["label"], line, "label"), line);
    ex.original_label = ex.label;
    if (rec.contains("original_label")) {
      ex.original_label = class_id(detail::label_key(rec["original_label"], line, "original_label"), line);
    }
    if (rec.contains("corrupted")) {
      if (!rec["corrupted"].is_boolean()) {
        throw IngestError("line " + std::to_string(line) + ": field 'corrupted' must be boolean");
      }
      ex.corrupted = rec["corrupted"].get<bool>();
    } else {
      ex.corrupted = ex.label != ex.original_label;
    }
    if (rec.contains("id")) {
      if (!rec["id"].is_number_unsigned() && !rec["id"].is_number_integer()) {
        throw IngestError("line " + std::to_string(line) + ": field 'id' must be a non-negative integer");
      }
      const auto v = rec["id"].get<std::int64_t>();
      if (v < 0) throw IngestError("line " + std::to_string(line) + ": negative id");
      ex.id = static_cast<std::uint64_t>(v);
    } else {
      ex.id = ds.examples.size();
    }
    if (!seen_ids.insert(ex.id).second) {
      throw IngestError("line " + std::to_string(line) + ": duplicate id " + std::to_string(ex.id));
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw IngestError("no examples in '" + path + "'");
  return ds;
}

/// One JSON object per line with every provenance field, so runs can be replayed.
inline void write_jsonl(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& e : ds.examples) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["text"] = e.text;
    j["label"] = ds.classes.at(e.label);
    j["original_label"] = ds.classes.at(e.original_label);
    j["corrupted"] = e.corrupted;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline void write_label_map(const std::string& path, const std::vector<std::string>& classes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  nlohmann::ordered_json j;
  j["classes"] = classes;
  out << j.dump(2) << '\n';
}

[[nodiscard]] inline std::vector<std::string> read_label_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open label map '" + path + "'");
  try {
    auto j = nlohmann::json::parse(in);
    return j.at("classes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("label map '" + path + "' is malformed: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Class statistics

/// Largest class count divided by the smallest.
[[nodiscard]] inline double imbalance_factor(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ContractError("imbalance_factor: no classes");
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*lo == 0) throw ContractError("imbalance_factor: a class has no examples");
  return double(*hi) / double(*lo);
}

[[nodiscard]] inline double imbalance_factor(const Dataset& ds) {
  const auto c = ds.class_counts();
  return imbalance_factor(std::span<const std::size_t>(c));
}

/// Named imbalance presets (values of the two reference corpora).
[[nodiscard]] inline double imbalance_preset(const std::string& name) {
  if (name == "amazon_review") return 51.3;
  if (name == "amazon_annotation") return 110.0;
  throw ConfigError("unknown imbalance preset '" + name + "'");
}

/// Classes ordered by descending count (ties by class id).
[[nodiscard]] inline std::vector<std::size_t> classes_by_size(std::span<const std::size_t> counts) {
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  return order;
}

/// Head classes: the larger half by training count (rank < ceil(C/2)).
[[nodiscard]] inline std::vector<bool> head_classes(std::span<const std::size_t> counts) {
  const auto order = classes_by_size(counts);
  std::vector<bool> head(counts.size(), false);
  for (std::size_t r = 0; r < (order.size() + 1) / 2; ++r) head[order[r]] = true;
  return head;
}

// ---------------------------------------------------------------------------
// Sampling helpers

namespace detail {

/// Deterministic permutation of `ids`, keyed by (seed, salt).
inline void shuffle_ids(std::vector<std::size_t>& idx, std::uint64_t seed, std::uint64_t salt) {
  std::mt19937_64 rng(mix_seed(seed, {salt}));
  std::shuffle(idx.begin(), idx.end(), rng);
}

inline std::vector<std::vector<std::size_t>> positions_by_class(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> pos(ds.num_classes());
  for (std::size_t i = 0; i < ds.examples.size(); ++i) pos.at(ds.examples[i].label).push_back(i);
  return pos;
}

/// Splits `ds` into (rest, taken) taking take[c] uniformly-random examples of class c.
/// Both parts keep the input order.
inline std::pair<Dataset, Dataset> take_per_class(const Dataset& ds, std::span<const std::size_t> take,
                                                  std::uint64_t seed, std::uint64_t salt) {
  auto pos = positions_by_class(ds);
  std::vector<bool> chosen(ds.examples.size(), false);
  for (std::size_t c = 0; c < pos.size(); ++c) {
    if (take[c] > pos[c].size()) throw ContractError("take_per_class: class " + ds.classes[c] + " too small");
    shuffle_ids(pos[c], seed, salt * 1000003 + c);
    for (std::size_t k = 0; k < take[c]; ++k) chosen[pos[c][k]] = true;
  }
  Dataset rest{{}, ds.classes};
  Dataset taken{{}, ds.classes};
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    (chosen[i] ? taken : rest).examples.push_back(ds.examples[i]);
  }
  return {std::move(rest), std::move(taken)};
}

/// Largest-remainder allocation of `total` proportional to `counts`.
inline std::vector<std::size_t> proportional_allocation(std::span<const std::size_t> counts, std::size_t total) {
  const double n = double(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  std::vector<std::size_t> alloc(counts.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t used = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double exact = n > 0 ? double(total) * double(counts[c]) / n : 0.0;
    alloc[c] = std::min(counts[c], static_cast<std::size_t>(std::floor(exact)));
    used += alloc[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total && k < remainders.size(); ++k) {
    const std::size_t c = remainders[k].second;
    if (alloc[c] < counts[c]) {
      ++alloc[c];
      ++used;
    }
  }
  return alloc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Long-tail synthesis

/// Target per-class sizes for an exponential profile, indexed by class id:
/// the class of size rank k keeps round(n0 * (1/IF)^(k/(C-1))).
[[nodiscard]] inline std::vector<std::size_t> longtail_sizes(std::span<const std::size_t> counts, double target_if,
                                                            std::size_t cap = 0) {
  if (!(target_if >= 1.0)) throw ContractError("make_longtail: target imbalance factor must be >= 1");
  if (counts.empty()) throw ContractError("make_longtail: no classes");
  const auto order = classes_by_size(counts);
  std::size_t n0 = counts[order[0]];
  if (cap > 0) n0 = std::min(n0, cap);
  const std::size_t C = counts.size();
  const double mu = 1.0 / target_if;
  std::vector<std::size_t> sizes(C, 0);
  std::string infeasible;
  for (std::size_t k = 0; k < C; ++k) {
    const double expo = C == 1 ? 0.0 : double(k) / double(C - 1);
    const auto want = static_cast<std::size_t>(std::llround(double(n0) * std::pow(mu, expo)));
    const std::size_t c = order[k];
    if (want == 0 || want > counts[c]) {
      infeasible += (infeasible.empty() ? "" : ", ") + std::to_string(c) + " (needs " + std::to_string(want) +
                    ", has " + std::to_string(counts[c]) + ")";
    }
    sizes[c] = want;
  }
  if (!infeasible.empty()) {
    throw DataError("make_longtail: infeasible imbalance factor " + std::to_string(target_if) + " for class " +
                    infeasible);
  }
  return sizes;
}

/// Uniform subsample without replacement to the exponential profile; result is a
/// subset of the input (original order preserved).
[[nodiscard]] inline Dataset make_longtail(const Dataset& ds, double target_if, std::uint64_t seed,
                                           std::size_t cap = 0) {
  const auto counts = ds.class_counts();
  const auto sizes = longtail_sizes(counts, target_if, cap);
  return detail::take_per_class(ds, sizes, seed, 0x1A11).second;
}

// ---------------------------------------------------------------------------
// Uniform label noise

struct NoiseSpec {
  double rho = 0.0;
  std::uint64_t seed = 0;
};

struct NoiseDraw {
  bool fired = false;
  std::size_t label = 0;  // uniform over all classes when fired
};

/// The corruption draw for one example id: a pure function of (seed, id), so
/// the outcome is independent of dataset order and thread count.
[[nodiscard]] inline NoiseDraw uniform_noise_draw(const NoiseSpec& spec, std::uint64_t id, std::size_t num_classes) {
  NoiseDraw d;
  d.fired = to_unit(mix_seed(spec.seed, {id, 0})) < spec.rho;
  if (d.fired) d.label = static_cast<std::size_t>(to_index(mix_seed(spec.seed, {id, 1}), num_classes));
  return d;
}

/// With probability rho replace each non-excluded label by a class drawn uniformly
/// from all C classes (possibly the original); `corrupted` marks actual changes.
[[nodiscard]] inline Dataset inject_uniform_noise(const Dataset& ds, const NoiseSpec& spec,
                                                  const std::unordered_set<std::uint64_t>& exclude = {}) {
  if (!(spec.rho >= 0.0 && spec.rho <= 1.0)) throw ContractError("inject_uniform_noise: rho must lie in [0,1]");
  Dataset out = ds;
  const std::size_t C = ds.num_classes();
  if (C <= 1 || spec.rho == 0.0) return out;
  for (auto& e : out.examples) {
    if (exclude.contains(e.id)) continue;
    const auto d = uniform_noise_draw(spec, e.id, C);
    if (!d.fired) continue;
    e.label = d.label;
    e.corrupted = e.label != e.original_label;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

/// Carves a clean meta set D_m out of `ds` (must precede noise injection).
/// Balanced: ceil(fraction*N/C) per class (capped at class size); otherwise a
/// class-proportional draw of round(fraction*N) examples.
[[nodiscard]] inline std::pair<Dataset, Dataset> split_meta(const Dataset& ds, double fraction, bool balanced,
                                                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("split_meta: fraction must lie in (0,1)");
  for (const auto& e : ds.examples) {
    if (e.corrupted || e.label != e.original_label) {
      throw ContractError("split_meta: dataset already contains corrupted labels");
    }
  }
  const auto counts = ds.class_counts();
  std::vector<std::size_t> take(counts.size());
  if (balanced) {
    const auto per = static_cast<std::size_t>(std::ceil(fraction * double(ds.size()) / double(counts.size()) - 1e-9));
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] == 0) throw DataError("split_meta: balanced mode but class " + ds.classes[c] + " is empty");
      take[c] = std::min(per, counts[c]);
    }
  } else {
    const auto total = static_cast<std::size_t>(std::llround(fraction * double(ds.size())));
    take = detail::proportional_allocation(counts, std::max<std::size_t>(total, 1));
  }
  return detail::take_per_class(ds, take, seed, 0x3E7A);
}

/// Held-out test set: `per_class` examples per class when non-zero, else a
/// class-proportional `fraction` of the data.
[[nodiscard]] inline std::pair<Dataset, Dataset> split_test(const Dataset& ds, double fraction, std::size_t per_class,
                                                            std::uint64_t seed) {
  const auto counts = ds.class_counts();
  std::vector<std::size_t> take(counts.size());
  if (per_class > 0) {
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] < per_class) {
        throw DataError("split_test: class " + ds.classes[c] + " has fewer than " + std::to_string(per_class) +
                        " examples");
      }
      take[c] = per_class;
    }
  } else {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("split_test: fraction must lie in (0,1)");
    take = detail::proportional_allocation(counts, static_cast<std::size_t>(std::llround(fraction * double(ds.size()))));
  }
  return detail::take_per_class(ds, take, seed, 0x7E57);
}

struct SynthOptions {
  double imbalance = 1.0;   // exponential long-tail target (1 = leave as is)
  std::size_t cap = 0;      // optional cap on the largest class
  double rho = 0.0;
  double meta_fraction = 0.01;
  bool balanced_meta = false;
  double test_fraction = 0.2;
  std::size_t test_per_class = 0;  // overrides test_fraction when non-zero
  std::uint64_t seed = 0;
};

/// test carve-out -> long-tail subsample -> clean meta split -> noise on the rest.
[[nodiscard]] inline DatasetSplit synthesize(const Dataset& source, const SynthOptions& o) {
  auto [pool, test] = split_test(source, o.test_fraction, o.test_per_class, mix_seed(o.seed, {'T'}));
  Dataset shaped = o.imbalance > 1.0 ? make_longtail(pool, o.imbalance, mix_seed(o.seed, {'L'}), o.cap) : pool;
  auto [train, meta] = split_meta(shaped, o.meta_fraction, o.balanced_meta, mix_seed(o.seed, {'M'}));
  std::unordered_set<std::uint64_t> exclude = meta.ids();
  for (const auto& e : test.examples) exclude.insert(e.id);
  DatasetSplit s;
  s.train = inject_uniform_noise(train, NoiseSpec{o.rho, mix_seed(o.seed, {'N'})}, exclude);
  s.meta = std::move(meta);
  s.test = std::move(test);
  return s;
}

inline void write_split(const std::string& dir, const DatasetSplit& s) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
  write_jsonl(dir + "/train.jsonl", s.train);
  write_jsonl(dir + "/meta.jsonl", s.meta);
  write_jsonl(dir + "/test.jsonl", s.test);
  write_label_map(dir + "/labels.json", s.train.classes);
}

[[nodiscard]] inline DatasetSplit read_split(const std::string& dir) {
  const auto classes = read_label_map(dir + "/labels.json");
  DatasetSplit s;
  s.train = ingest(dir + "/train.jsonl", &classes);
  s.meta = ingest(dir + "/meta.jsonl", &classes);
  std::ifstream probe(dir + "/test.jsonl");
  if (probe) s.test = ingest(dir + "/test.jsonl", &classes);
  else s.test.classes = classes;
  return s;
}

/// Throws ConfigError when any two parts share an example id.
inline void check_disjoint(const DatasetSplit& s) {
  std::unordered_map<std::uint64_t, char> owner;
  auto visit = [&](const Dataset& d, char tag) {
    for (const auto& e : d.examples) {
      auto [it, fresh] = owner.emplace(e.id, tag);
      if (!fresh && it->second != tag) {
        throw ConfigError("example id " + std::to_string(e.id) + " appears in more than one split");
      }
    }
  };
  visit(s.train, 't');
  visit(s.meta, 'm');
  visit(s.test, 'e');
}

}  // namespace apam::data
