#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "apam/evalcli/experiment.hpp"

namespace apam::eval {

/// Worker cap: APAM_THREADS when set to a positive integer, else the hardware count.
[[nodiscard]] inline std::size_t thread_cap() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("APAM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = std::size_t(v);
  }
  return n;
}

/// Runs job(i) for i in [0, n) on up to `threads` workers. Jobs write to their own slot.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct SweepCell {
  std::optional<double> accuracy;
  std::string error;  // set when the run failed
};

struct SweepTable {
  std::vector<Pipeline> pipelines;
  std::vector<double> rhos;
  std::vector<std::vector<SweepCell>> cells;  // [pipeline][rho]

  /// Mean over the row's successful cells.
  [[nodiscard]] std::optional<double> average(std::size_t row) const {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& c : cells[row]) {
      if (!c.accuracy) continue;
      sum += *c.accuracy;
      ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / double(n);
  }
};

inline const std::vector<Pipeline> kSweepPipelines = {Pipeline::ce_baseline, Pipeline::mwn, Pipeline::apam};

/// One run per (pipeline, rho) on the base config with only the noise rate changed.
/// Failed runs are recorded in their cell; the sweep carries on.
[[nodiscard]] inline SweepTable sensitivity_sweep(const ExperimentConfig& base, const std::vector<double>& rhos,
                                                  const std::vector<Pipeline>& pipelines = kSweepPipelines,
                                                  std::size_t threads = thread_cap()) {
  if (rhos.empty()) throw ConfigError("sweep: empty rho list");
  for (double r : rhos)
    if (!(r >= 0 && r <= 1)) throw ConfigError("sweep: rho values must lie in [0,1]");
  if (pipelines.empty()) throw ConfigError("sweep: no pipelines");
  if (base.data.split_dir) throw ConfigError("sweep: needs a source or synthetic dataset, not a prepared split");

  SweepTable t{pipelines, rhos, std::vector<std::vector<SweepCell>>(pipelines.size(), std::vector<SweepCell>(rhos.size()))};

  // Splits per rho. The noise only touches labels, so the pre-trained encoder is shared.
  std::vector<std::optional<data::DatasetSplit>> splits(rhos.size());
  std::vector<std::string> split_errors(rhos.size());
  parallel_for(rhos.size(), threads, [&](std::size_t k) {
    auto c = base;
    c.data.split.rho = rhos[k];
    try {
      splits[k] = load_data(c);
    } catch (const std::exception& e) {
      split_errors[k] = e.what();
    }
  });

  std::optional<Prepared> pretrained;
  std::string pretrain_error;
  const bool any_pretrain = std::any_of(pipelines.begin(), pipelines.end(), uses_pretrain);
  const auto first = std::find_if(splits.begin(), splits.end(), [](const auto& s) { return s.has_value(); });
  if (any_pretrain && first != splits.end()) {
    auto c = base;
    c.pipeline = Pipeline::apam;
    try {
      pretrained = prepare_encoder(c, **first);
    } catch (const std::exception& e) {
      pretrain_error = e.what();
    }
  }

  const std::size_t n = pipelines.size() * rhos.size();
  parallel_for(n, threads, [&](std::size_t i) {
    const std::size_t p = i / rhos.size(), k = i % rhos.size();
    auto& cell = t.cells[p][k];
    if (!splits[k]) {
      cell.error = split_errors[k];
      return;
    }
    auto c = base;
    c.pipeline = pipelines[p];
    c.data.split.rho = rhos[k];
    try {
      std::optional<Prepared> plain;
      const Prepared* prep = nullptr;
      if (uses_pretrain(c.pipeline)) {
        if (!pretrained) throw Error(pretrain_error.empty() ? "pretraining failed" : pretrain_error);
        prep = &*pretrained;
      } else {
        prep = &plain.emplace(prepare_encoder(c, *splits[k]));
      }
      cell.accuracy = run_pipeline(c, *splits[k], prep).metrics.accuracy;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });
  return t;
}

[[nodiscard]] inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// pipeline,<rho>...,average; failed cells read FAILED.
[[nodiscard]] inline std::string sweep_csv(const SweepTable& t) {
  std::string out = "pipeline";
  for (double r : t.rhos) out += "," + format_number(r);
  out += ",average\n";
  for (std::size_t p = 0; p < t.pipelines.size(); ++p) {
    out += std::string(pipeline_name(t.pipelines[p]));
    for (const auto& c : t.cells[p]) out += "," + (c.accuracy ? format_number(*c.accuracy) : std::string("FAILED"));
    const auto avg = t.average(p);
    out += "," + (avg ? format_number(*avg) : std::string("FAILED")) + "\n";
  }
  return out;
}

[[nodiscard]] inline nlohmann::ordered_json sweep_json(const SweepTable& t, const ExperimentConfig& base) {
  nlohmann::ordered_json j;
  j["version"] = version();
  j["config"] = config_json(base);
  j["rhos"] = t.rhos;
  j["rows"] = nlohmann::ordered_json::array();
  for (std::size_t p = 0; p < t.pipelines.size(); ++p) {
    nlohmann::ordered_json row;
    row["pipeline"] = std::string(pipeline_name(t.pipelines[p]));
    row["accuracy"] = nlohmann::ordered_json::array();
    row["errors"] = nlohmann::ordered_json::array();
    for (const auto& c : t.cells[p]) {
      row["accuracy"].push_back(c.accuracy ? nlohmann::ordered_json(*c.accuracy) : nlohmann::ordered_json(nullptr));
      row["errors"].push_back(c.error);
    }
    const auto avg = t.average(p);
    row["average"] = avg ? nlohmann::ordered_json(*avg) : nlohmann::ordered_json(nullptr);
    j["rows"].push_back(row);
  }
  return j;
}

}  // namespace apam::eval
