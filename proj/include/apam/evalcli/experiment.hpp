#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "apam/checkpoint.hpp"
#include "apam/data.hpp"
#include "apam/evalcli/config.hpp"
#include "apam/evalcli/metrics.hpp"
#include "apam/meta.hpp"
#include "apam/pretrain.hpp"
#include "apam/synthetic.hpp"
#include "apam/textmodel.hpp"

#ifndef APAM_VERSION
#define APAM_VERSION "unknown"
#endif

namespace apam::eval {

using Model = text::EncoderParams<float>;

[[nodiscard]] inline std::string version() { return APAM_VERSION; }

[[nodiscard]] inline data::DatasetSplit load_data(const ExperimentConfig& c) {
  if (c.data.split_dir) {
    auto s = data::read_split(*c.data.split_dir);
    data::check_disjoint(s);
    return s;
  }
  const data::Dataset source = c.data.source ? data::ingest(*c.data.source) : data::make_synthetic(*c.data.synthetic);
  return data::synthesize(source, c.data.split);
}

/// Initial encoder for the pipeline, contrastively pre-trained on the training texts when it calls for it.
struct Prepared {
  Model encoder;
  std::vector<double> pretrain_loss;
};

[[nodiscard]] inline Prepared prepare_encoder(const ExperimentConfig& c, const data::DatasetSplit& s) {
  Prepared p{text::init_encoder<float>(c.model, c.seed), {}};
  if (uses_pretrain(c.pipeline) && c.pretrain.epochs > 0) {
    auto r = pretrain::pretrain(s.train.texts(), std::move(p.encoder), c.pretrain);
    p.encoder = std::move(r.encoder);
    p.pretrain_loss = std::move(r.epoch_loss);
  }
  return p;
}

[[nodiscard]] inline std::vector<std::size_t> predict(const Model& W, const data::Dataset& ds) {
  std::vector<std::size_t> out;
  out.reserve(ds.size());
  for (const auto& e : ds.examples) {
    const auto z = text::logits(W, e.text);
    std::size_t best = 0;
    for (std::size_t k = 1; k < z.size(); ++k)
      if (z[k] > z[best]) best = k;
    out.push_back(best);
  }
  return out;
}

[[nodiscard]] inline std::vector<std::size_t> golds(const data::Dataset& ds) {
  std::vector<std::size_t> g;
  g.reserve(ds.size());
  for (const auto& e : ds.examples) g.push_back(e.label);
  return g;
}

/// Metrics on `test`; head/tail classes follow the training distribution.
[[nodiscard]] inline MetricsReport evaluate(const Model& W, const data::Dataset& test,
                                            const std::vector<std::size_t>& train_counts) {
  return compute_metrics(predict(W, test), golds(test), test.num_classes(), data::head_classes(train_counts));
}

struct RunResult {
  Model model;
  std::optional<meta::WeightNet> theta;
  std::optional<meta::WeightSummary> weights;
  std::vector<meta::StepLog> log;
  std::vector<double> pretrain_loss;
  MetricsReport metrics;
  nlohmann::ordered_json report;
};

[[nodiscard]] inline meta::WeightNet initial_theta(std::uint64_t seed) {
  return meta::WeightNet::random(mix_seed(seed, {0x7E7A}));
}

namespace detail {

inline nlohmann::ordered_json opt(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json data_json(const data::DatasetSplit& s) {
  std::size_t corrupted = 0;
  for (const auto& e : s.train.examples) corrupted += e.corrupted;
  const auto counts = s.train.class_counts();
  nlohmann::ordered_json j;
  j["classes"] = s.train.classes;
  j["train"] = s.train.size();
  j["meta"] = s.meta.size();
  j["test"] = s.test.size();
  j["train_class_counts"] = counts;
  j["meta_class_counts"] = s.meta.class_counts();
  j["imbalance_factor"] = data::imbalance_factor(counts);
  j["corrupted_train"] = corrupted;
  return j;
}

}  // namespace detail

/// Trains and evaluates one pipeline on a loaded split. `prepared` must come from
/// prepare_encoder with the same config; it is recomputed when absent.
[[nodiscard]] inline RunResult run_pipeline(const ExperimentConfig& c, const data::DatasetSplit& s,
                                            const Prepared* prepared = nullptr) {
  c.validate();
  data::check_disjoint(s);
  std::optional<Prepared> own;
  if (!prepared) prepared = &own.emplace(prepare_encoder(c, s));

  RunResult r;
  r.pretrain_loss = prepared->pretrain_loss;
  auto tc = c.train;
  tc.loss.kind = pipeline_loss(c.pipeline, c.train.loss.kind);
  meta::TrainResult<float> t;
  if (uses_meta(c.pipeline)) {
    t = meta::train(s.train, s.meta, prepared->encoder, initial_theta(c.seed), tc);
    r.theta = t.theta;
    r.weights = meta::final_weights(s.train, t.W, t.theta, tc.loss);
  } else {
    t = meta::finetune(s.train, prepared->encoder, tc);
  }
  r.model = std::move(t.W);
  r.log = std::move(t.log);
  const auto counts = s.train.class_counts();
  r.metrics = evaluate(r.model, s.test, counts);

  auto& j = r.report;
  j["version"] = version();
  j["name"] = c.name;
  j["pipeline"] = std::string(pipeline_name(c.pipeline));
  j["seed"] = c.seed;
  j["loss"] = std::string(loss::kind_name(tc.loss.kind));
  j["config"] = config_json(c);
  j["data"] = detail::data_json(s);
  j["pretrain"] = {{"epochs_run", r.pretrain_loss.size()}, {"epoch_loss", r.pretrain_loss}};
  j["train"] = {{"steps", r.log.size()}, {"final_train_loss", nullptr}, {"final_meta_loss", nullptr}};
  if (!r.log.empty()) {
    j["train"]["final_train_loss"] = r.log.back().train_loss;
    j["train"]["final_meta_loss"] = detail::opt(r.log.back().meta_loss);
  }
  if (r.weights) {
    const auto& w = *r.weights;
    j["weights"] = {{"clean", detail::opt(w.clean)},
                    {"noisy", detail::opt(w.noisy)},
                    {"gap", detail::opt(w.clean && w.noisy ? std::optional(*w.clean - *w.noisy) : std::nullopt)},
                    {"head", detail::opt(w.head)},
                    {"tail", detail::opt(w.tail)}};
  } else {
    j["weights"] = nullptr;
  }
  j["metrics"] = metrics_json(r.metrics, s.train.classes);
  return r;
}

// ---------------------------------------------------------------------------
// Model checkpoints: encoder + head, label map, and the weight net when trained.

inline void save_model(const std::string& path, const Model& W, const std::vector<std::string>& classes,
                       const std::optional<meta::WeightNet>& theta = std::nullopt) {
  auto records = text::to_records(W);
  records.push_back(ckpt::make_text_record("labels", nlohmann::json(classes).dump()));
  if (theta)
    for (auto& r : meta::to_records(*theta)) records.push_back(std::move(r));
  ckpt::write_file(path, records);
}

struct LoadedModel {
  Model W;
  std::vector<std::string> classes;
  std::optional<meta::WeightNet> theta;
};

[[nodiscard]] inline LoadedModel load_model(const std::string& path) {
  const auto records = ckpt::read_file(path);
  LoadedModel m;
  m.W = text::from_records<float>(records);
  if (const auto* l = ckpt::find(records, "labels")) {
    m.classes = nlohmann::json::parse(ckpt::record_text(*l)).get<std::vector<std::string>>();
  }
  m.theta = meta::from_records(records);
  return m;
}

[[nodiscard]] inline std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << body;
}

/// Files written into the output directory.
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kLogFile = "train_log.csv";
inline constexpr const char* kPretrainFile = "pretrain_loss.csv";
inline constexpr const char* kModelFile = "model.ckpt";

inline void write_outputs(const RunResult& r, const std::vector<std::string>& classes, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  write_text((dir / kReportFile).string(), dump(r.report));
  meta::write_log_csv((dir / kLogFile).string(), r.log);
  if (!r.pretrain_loss.empty()) pretrain::write_loss_trace((dir / kPretrainFile).string(), r.pretrain_loss);
  save_model((dir / kModelFile).string(), r.model, classes, r.theta);
}

/// load -> pretrain (if enabled) -> train -> test evaluation, then the report files.
inline RunResult run_experiment(const ExperimentConfig& c, const std::string& out_dir) {
  const auto split = load_data(c);
  auto r = run_pipeline(c, split);
  write_outputs(r, split.train.classes, out_dir);
  return r;
}

}  // namespace apam::eval
