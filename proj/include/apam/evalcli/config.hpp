#pragma once

#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "apam/data.hpp"
#include "apam/errors.hpp"
#include "apam/meta.hpp"
#include "apam/pretrain.hpp"
#include "apam/synthetic.hpp"
#include "apam/textmodel.hpp"

namespace apam::eval {

enum class Pipeline { ce_baseline, focal, class_balanced, mwn, simcse_only, apam };

inline constexpr Pipeline kPipelines[] = {Pipeline::ce_baseline, Pipeline::focal,       Pipeline::class_balanced,
                                          Pipeline::mwn,         Pipeline::simcse_only, Pipeline::apam};

[[nodiscard]] inline std::string_view pipeline_name(Pipeline p) {
  switch (p) {
    case Pipeline::ce_baseline: return "ce_baseline";
    case Pipeline::focal: return "focal";
    case Pipeline::class_balanced: return "class_balanced";
    case Pipeline::mwn: return "mwn";
    case Pipeline::simcse_only: return "simcse_only";
    case Pipeline::apam: return "apam";
  }
  return "?";
}

[[nodiscard]] inline Pipeline parse_pipeline(std::string_view s) {
  for (Pipeline p : kPipelines)
    if (pipeline_name(p) == s) return p;
  throw ConfigError("unknown pipeline '" + std::string(s) +
                    "' (expected ce_baseline, focal, class_balanced, mwn, simcse_only or apam)");
}

[[nodiscard]] inline bool uses_pretrain(Pipeline p) { return p == Pipeline::simcse_only || p == Pipeline::apam; }
[[nodiscard]] inline bool uses_meta(Pipeline p) { return p == Pipeline::mwn || p == Pipeline::apam; }

/// Loss the pipeline trains with; the reweighting pipelines keep the configured one.
[[nodiscard]] inline loss::Kind pipeline_loss(Pipeline p, loss::Kind configured) {
  switch (p) {
    case Pipeline::ce_baseline:
    case Pipeline::simcse_only: return loss::Kind::cross_entropy;
    case Pipeline::focal: return loss::Kind::focal;
    case Pipeline::class_balanced: return loss::Kind::class_balanced;
    default: return configured;
  }
}

/// Exactly one of split_dir, source, synthetic is set.
struct DataConfig {
  std::optional<std::string> split_dir;
  std::optional<std::string> source;
  std::optional<data::SyntheticSpec> synthetic;
  data::SynthOptions split;
};

struct ExperimentConfig {
  std::string name = "run";
  Pipeline pipeline = Pipeline::apam;
  std::uint64_t seed = 1;
  DataConfig data;
  text::ModelConfig model;
  pretrain::PretrainConfig pretrain;
  meta::TrainConfig train;

  void validate() const {
    const int sources = int(data.split_dir.has_value()) + int(data.source.has_value()) + int(data.synthetic.has_value());
    if (sources != 1) throw ConfigError("config: data needs exactly one of split_dir, source, synthetic");
    if (!(data.split.rho >= 0 && data.split.rho <= 1)) throw ConfigError("config: data.split.rho must lie in [0,1]");
    if (!(data.split.meta_fraction > 0 && data.split.meta_fraction < 1)) {
      throw ConfigError("config: data.split.meta_fraction must lie in (0,1)");
    }
    if (data.synthetic) data.synthetic->validate();
    pretrain.validate();
    train.validate();
  }
};

namespace detail {

/// Rejects keys outside `allowed` so typos fail loudly.
inline void check_keys(const nlohmann::json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError("config: " + std::string(where) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == k;
    if (!ok) throw ConfigError("config: unknown key '" + k + "' in " + std::string(where));
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, std::string_view where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for " + std::string(where) + "." + key);
  }
}

inline void read_optional(const nlohmann::json& j, const char* key, std::optional<double>& out, std::string_view where) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  double v = 0;
  read(j, key, v, where);
  out = v;
}

inline data::SyntheticSpec parse_synthetic(const nlohmann::json& j, std::uint64_t seed) {
  check_keys(j, "data.synthetic",
             {"classes", "per_class", "cluster_words", "background_words", "signal", "confusion", "min_len", "max_len",
              "seed"});
  data::SyntheticSpec s;
  s.seed = seed;
  read(j, "classes", s.classes, "data.synthetic");
  read(j, "per_class", s.per_class, "data.synthetic");
  read(j, "cluster_words", s.cluster_words, "data.synthetic");
  read(j, "background_words", s.background_words, "data.synthetic");
  read(j, "signal", s.signal, "data.synthetic");
  read(j, "confusion", s.confusion, "data.synthetic");
  read(j, "min_len", s.min_len, "data.synthetic");
  read(j, "max_len", s.max_len, "data.synthetic");
  read(j, "seed", s.seed, "data.synthetic");
  return s;
}

inline data::SynthOptions parse_split(const nlohmann::json& j, std::uint64_t seed) {
  check_keys(j, "data.split",
             {"imbalance", "cap", "rho", "meta_fraction", "balanced_meta", "test_fraction", "test_per_class", "seed"});
  data::SynthOptions o;
  o.seed = seed;
  read(j, "imbalance", o.imbalance, "data.split");
  read(j, "cap", o.cap, "data.split");
  read(j, "rho", o.rho, "data.split");
  read(j, "meta_fraction", o.meta_fraction, "data.split");
  read(j, "balanced_meta", o.balanced_meta, "data.split");
  read(j, "test_fraction", o.test_fraction, "data.split");
  read(j, "test_per_class", o.test_per_class, "data.split");
  read(j, "seed", o.seed, "data.split");
  return o;
}

inline text::ModelConfig parse_model(const nlohmann::json& j) {
  check_keys(j, "model", {"hash_buckets", "dim", "hidden1", "hidden2", "dropout_p", "lowercase"});
  text::ModelConfig m;
  read(j, "hash_buckets", m.hash_buckets, "model");
  read(j, "dim", m.dim, "model");
  read(j, "hidden1", m.hidden1, "model");
  read(j, "hidden2", m.hidden2, "model");
  read(j, "dropout_p", m.dropout_p, "model");
  read(j, "lowercase", m.lowercase, "model");
  return m;
}

inline pretrain::PretrainConfig parse_pretrain(const nlohmann::json& j, std::uint64_t seed) {
  check_keys(j, "pretrain", {"batch_size", "epochs", "tau", "dropout_p", "lr", "seed"});
  pretrain::PretrainConfig p;
  p.seed = seed;
  read(j, "batch_size", p.batch_size, "pretrain");
  read(j, "epochs", p.epochs, "pretrain");
  read(j, "tau", p.tau, "pretrain");
  read_optional(j, "dropout_p", p.dropout_p, "pretrain");
  read(j, "lr", p.lr, "pretrain");
  read(j, "seed", p.seed, "pretrain");
  return p;
}

inline meta::TrainConfig parse_train(const nlohmann::json& j, std::uint64_t seed) {
  check_keys(j, "train",
             {"alpha", "beta_meta", "lr", "steps", "batch_size", "meta_batch_size", "loss", "epsilon", "gamma",
              "cb_beta", "update_theta", "seed"});
  meta::TrainConfig t;
  t.seed = seed;
  read(j, "alpha", t.alpha, "train");
  read(j, "beta_meta", t.beta_meta, "train");
  read_optional(j, "lr", t.lr, "train");
  read(j, "steps", t.steps, "train");
  read(j, "batch_size", t.batch_size, "train");
  read(j, "meta_batch_size", t.meta_batch_size, "train");
  if (j.contains("loss")) {
    std::string kind;
    read(j, "loss", kind, "train");
    t.loss.kind = loss::parse_kind(kind);
  }
  read(j, "epsilon", t.loss.epsilon, "train");
  read(j, "gamma", t.loss.gamma, "train");
  read(j, "cb_beta", t.loss.cb_beta, "train");
  read(j, "update_theta", t.update_theta, "train");
  read(j, "seed", t.seed, "train");
  return t;
}

}  // namespace detail

/// Section seeds default to the top-level seed.
[[nodiscard]] inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using namespace detail;
  check_keys(j, "config", {"name", "pipeline", "seed", "data", "model", "pretrain", "train"});
  ExperimentConfig c;
  read(j, "name", c.name, "config");
  if (j.contains("pipeline")) {
    std::string p;
    read(j, "pipeline", p, "config");
    c.pipeline = parse_pipeline(p);
  }
  read(j, "seed", c.seed, "config");
  if (!j.contains("data")) throw ConfigError("config: missing data section");
  const auto& d = j.at("data");
  check_keys(d, "data", {"split_dir", "source", "synthetic", "split"});
  if (d.contains("split_dir")) c.data.split_dir = d.at("split_dir").get<std::string>();
  if (d.contains("source")) c.data.source = d.at("source").get<std::string>();
  if (d.contains("synthetic")) c.data.synthetic = parse_synthetic(d.at("synthetic"), c.seed);
  c.data.split = parse_split(d.value("split", nlohmann::json::object()), c.seed);
  if (j.contains("model")) c.model = parse_model(j.at("model"));
  c.pretrain = parse_pretrain(j.value("pretrain", nlohmann::json::object()), c.seed);
  c.train = parse_train(j.value("train", nlohmann::json::object()), c.seed);
  c.validate();
  return c;
}

[[nodiscard]] inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Canonical echo; parse_config(config_json(c)) reproduces c.
[[nodiscard]] inline nlohmann::ordered_json config_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["pipeline"] = std::string(pipeline_name(c.pipeline));
  j["seed"] = c.seed;
  auto& d = j["data"];
  if (c.data.split_dir) d["split_dir"] = *c.data.split_dir;
  if (c.data.source) d["source"] = *c.data.source;
  if (c.data.synthetic) {
    const auto& s = *c.data.synthetic;
    d["synthetic"] = {{"classes", s.classes},     {"per_class", s.per_class}, {"cluster_words", s.cluster_words},
                      {"background_words", s.background_words}, {"signal", s.signal}, {"confusion", s.confusion},
                      {"min_len", s.min_len},     {"max_len", s.max_len},     {"seed", s.seed}};
  }
  const auto& o = c.data.split;
  d["split"] = {{"imbalance", o.imbalance},         {"cap", o.cap},
                {"rho", o.rho},                     {"meta_fraction", o.meta_fraction},
                {"balanced_meta", o.balanced_meta}, {"test_fraction", o.test_fraction},
                {"test_per_class", o.test_per_class}, {"seed", o.seed}};
  const auto& m = c.model;
  j["model"] = {{"hash_buckets", m.hash_buckets}, {"dim", m.dim},           {"hidden1", m.hidden1},
                {"hidden2", m.hidden2},           {"dropout_p", m.dropout_p}, {"lowercase", m.lowercase}};
  const auto& p = c.pretrain;
  j["pretrain"] = {{"batch_size", p.batch_size}, {"epochs", p.epochs}, {"tau", p.tau}, {"lr", p.lr}, {"seed", p.seed}};
  j["pretrain"]["dropout_p"] = p.dropout_p ? nlohmann::ordered_json(*p.dropout_p) : nlohmann::ordered_json(nullptr);
  const auto& t = c.train;
  j["train"] = {{"alpha", t.alpha},
                {"beta_meta", t.beta_meta},
                {"lr", t.w_lr()},
                {"steps", t.steps},
                {"batch_size", t.batch_size},
                {"meta_batch_size", t.meta_batch_size},
                {"loss", std::string(loss::kind_name(t.loss.kind))},
                {"epsilon", t.loss.epsilon},
                {"gamma", t.loss.gamma},
                {"cb_beta", t.loss.cb_beta},
                {"update_theta", t.update_theta},
                {"seed", t.seed}};
  return j;
}

}  // namespace apam::eval
