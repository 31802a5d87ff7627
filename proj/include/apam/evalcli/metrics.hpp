#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "apam/data.hpp"
#include "apam/errors.hpp"

namespace apam::eval {

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

struct Averages {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Metrics restricted to the examples whose gold label falls in a class group.
struct GroupMetrics {
  std::vector<std::size_t> classes;
  std::size_t support = 0;
  double accuracy = 0;
  double macro_f1 = 0;
};

struct MetricsReport {
  std::size_t count = 0;
  double accuracy = 0;
  Averages weighted;
  Averages macro;
  std::vector<ClassMetrics> per_class;
  GroupMetrics head;
  GroupMetrics tail;
};

namespace detail {

inline double ratio(std::size_t num, std::size_t den) { return den == 0 ? 0.0 : double(num) / double(den); }

inline double f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

inline GroupMetrics group(const std::vector<ClassMetrics>& pc, std::span<const std::size_t> preds,
                          std::span<const std::size_t> golds, const std::vector<bool>& member) {
  GroupMetrics g;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (!member[golds[i]]) continue;
    ++g.support;
    hit += preds[i] == golds[i];
  }
  g.accuracy = ratio(hit, g.support);
  std::size_t scored = 0;
  for (std::size_t c = 0; c < pc.size(); ++c) {
    if (!member[c]) continue;
    g.classes.push_back(c);
    if (pc[c].support == 0) continue;
    g.macro_f1 += pc[c].f1;
    ++scored;
  }
  if (scored) g.macro_f1 /= double(scored);
  return g;
}

}  // namespace detail

/// `head` flags head classes; when empty the split is by gold support in this evaluation set.
[[nodiscard]] inline MetricsReport compute_metrics(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                                                   std::size_t num_classes, std::vector<bool> head = {}) {
  if (preds.size() != golds.size()) {
    throw ContractError("compute_metrics: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(golds.size()) + " gold labels");
  }
  if (golds.empty()) throw ContractError("compute_metrics: no examples");
  if (num_classes == 0) throw ContractError("compute_metrics: no classes");
  if (!head.empty() && head.size() != num_classes) throw ContractError("compute_metrics: head mask size mismatch");

  std::vector<std::size_t> tp(num_classes, 0), predicted(num_classes, 0), support(num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (preds[i] >= num_classes || golds[i] >= num_classes) {
      throw ContractError("compute_metrics: class id out of range at position " + std::to_string(i));
    }
    ++support[golds[i]];
    ++predicted[preds[i]];
    if (preds[i] == golds[i]) {
      ++tp[golds[i]];
      ++correct;
    }
  }

  MetricsReport r;
  r.count = golds.size();
  r.accuracy = detail::ratio(correct, r.count);
  r.per_class.resize(num_classes);
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& m = r.per_class[c];
    m.support = support[c];
    m.precision = detail::ratio(tp[c], predicted[c]);
    m.recall = detail::ratio(tp[c], support[c]);
    m.f1 = detail::f1(m.precision, m.recall);
    const double w = double(support[c]) / double(r.count);
    r.weighted.precision += w * m.precision;
    r.weighted.recall += w * m.recall;
    r.weighted.f1 += w * m.f1;
    if (support[c] == 0) continue;
    ++present;
    r.macro.precision += m.precision;
    r.macro.recall += m.recall;
    r.macro.f1 += m.f1;
  }
  r.macro.precision /= double(present);
  r.macro.recall /= double(present);
  r.macro.f1 /= double(present);

  if (head.empty()) head = data::head_classes(support);
  std::vector<bool> tail(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) tail[c] = !head[c];
  r.head = detail::group(r.per_class, preds, golds, head);
  r.tail = detail::group(r.per_class, preds, golds, tail);
  return r;
}

inline void to_json(nlohmann::ordered_json& j, const Averages& a) {
  j = nlohmann::ordered_json{{"precision", a.precision}, {"recall", a.recall}, {"f1", a.f1}};
}

inline void to_json(nlohmann::ordered_json& j, const GroupMetrics& g) {
  j = nlohmann::ordered_json{
      {"classes", g.classes}, {"support", g.support}, {"accuracy", g.accuracy}, {"macro_f1", g.macro_f1}};
}

/// `classes` names the class ids in the per-class section.
[[nodiscard]] inline nlohmann::ordered_json metrics_json(const MetricsReport& r, const std::vector<std::string>& classes) {
  nlohmann::ordered_json j;
  j["count"] = r.count;
  j["accuracy"] = r.accuracy;
  j["weighted"] = r.weighted;
  j["macro"] = r.macro;
  j["per_class"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    j["per_class"].push_back({{"class", c < classes.size() ? classes[c] : std::to_string(c)},
                              {"precision", m.precision},
                              {"recall", m.recall},
                              {"f1", m.f1},
                              {"support", m.support}});
  }
  j["head"] = r.head;
  j["tail"] = r.tail;
  return j;
}

}  // namespace apam::eval
