#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apam/autodiff/tape.hpp"
#include "apam/errors.hpp"

namespace apam::loss {

using ad::NodeId;
using ad::Tape;

enum class Kind { cross_entropy, poly, focal, class_balanced };

[[nodiscard]] inline std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::cross_entropy: return "cross_entropy";
    case Kind::poly: return "poly";
    case Kind::focal: return "focal";
    case Kind::class_balanced: return "class_balanced";
  }
  return "?";
}

[[nodiscard]] inline Kind parse_kind(std::string_view s) {
  if (s == "cross_entropy" || s == "ce") return Kind::cross_entropy;
  if (s == "poly") return Kind::poly;
  if (s == "focal") return Kind::focal;
  if (s == "class_balanced") return Kind::class_balanced;
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

struct LossConfig {
  Kind kind = Kind::poly;
  double epsilon = 1.0;   // poly term weight
  double gamma = 2.0;     // focal exponent
  double cb_beta = 0.9999;
  double tau = 0.05;      // contrastive temperature

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("loss: epsilon must be >= 0");
    if (!(gamma >= 0)) throw ConfigError("loss: gamma must be >= 0");
    if (!(cb_beta >= 0 && cb_beta < 1)) throw ConfigError("loss: cb_beta must lie in [0,1)");
    if (!(tau > 0)) throw ConfigError("loss: tau must be > 0");
  }
};

namespace detail {

template <class T>
std::size_t checked_position(const Tape<T>& t, NodeId logits, std::size_t label) {
  const auto& s = t.shape(logits);
  if (s.rows != 1) throw ShapeError("loss: logits must be a single row, got " + s.str());
  if (label >= s.cols) {
    throw ContractError("loss: label " + std::to_string(label) + " out of range for " + std::to_string(s.cols) +
                        " classes");
  }
  return label;
}

}  // namespace detail

/// -log softmax(logits)[label]
template <class T>
NodeId cross_entropy(Tape<T>& t, NodeId logits, std::size_t label) {
  const auto pos = detail::checked_position(t, logits, label);
  return t.scale(t.gather(t.log_softmax(logits), {pos}), T(-1));
}

/// -log P_c + epsilon * (1 - P_c)
template <class T>
NodeId poly_loss(Tape<T>& t, NodeId logits, std::size_t label, double epsilon) {
  const NodeId ce = cross_entropy(t, logits, label);
  if (epsilon == 0.0) return ce;
  const NodeId pc = t.gather(t.softmax(logits), {label});
  return t.add(ce, t.add_scalar(t.scale(pc, T(-epsilon)), T(epsilon)));
}

/// -(1 - P_c)^gamma * log P_c
template <class T>
NodeId focal_loss(Tape<T>& t, NodeId logits, std::size_t label, double gamma) {
  const auto pos = detail::checked_position(t, logits, label);
  const NodeId log_pc = t.gather(t.log_softmax(logits), {pos});
  if (gamma == 0.0) return t.scale(log_pc, T(-1));
  const NodeId one_minus = t.add_scalar(t.scale(t.gather(t.softmax(logits), {pos}), T(-1)), T(1));
  return t.scale(t.mul(t.pow(one_minus, T(gamma)), log_pc), T(-1));
}

/// w_c proportional to (1 - beta) / (1 - beta^{n_c}), rescaled so the weights sum to C.
[[nodiscard]] inline std::vector<double> class_balanced_weights(std::span<const std::size_t> counts, double beta) {
  if (counts.empty()) throw ContractError("class_balanced_weights: no classes");
  if (!(beta >= 0 && beta < 1)) throw ContractError("class_balanced_weights: beta must lie in [0,1)");
  std::vector<double> w;
  double total = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ContractError("class_balanced_weights: class " + std::to_string(c) + " has zero count");
    const double raw = beta == 0.0 ? 1.0 : (1.0 - beta) / (1.0 - std::pow(beta, double(counts[c])));
    w.push_back(raw);
    total += raw;
  }
  const double norm = double(counts.size()) / total;
  for (auto& v : w) v *= norm;
  return w;
}

/// weight[label] * cross_entropy
template <class T>
NodeId class_balanced_loss(Tape<T>& t, NodeId logits, std::size_t label, std::span<const double> weights) {
  const NodeId ce = cross_entropy(t, logits, label);
  if (label >= weights.size()) throw ContractError("class_balanced_loss: no weight for label");
  return t.scale(ce, T(weights[label]));
}

/// Dispatch on the configured kind. `cb_weights` is only read for class_balanced.
template <class T>
NodeId sample_loss(Tape<T>& t, const LossConfig& cfg, NodeId logits, std::size_t label,
                   std::span<const double> cb_weights = {}) {
  switch (cfg.kind) {
    case Kind::cross_entropy: return cross_entropy(t, logits, label);
    case Kind::poly: return poly_loss(t, logits, label, cfg.epsilon);
    case Kind::focal: return focal_loss(t, logits, label, cfg.gamma);
    case Kind::class_balanced: return class_balanced_loss(t, logits, label, cb_weights);
  }
  throw ConfigError("unknown loss kind");
}

/// In-batch contrastive loss with same-index positives, averaged over rows:
///   mean_i -log( exp(sim(a_i, p_i)/tau) / sum_j exp(sim(a_i, p_j)/tau) )
/// with cosine similarity.
template <class T>
NodeId contrastive_loss(Tape<T>& t, NodeId anchors, NodeId positives, double tau) {
  const auto& sa = t.shape(anchors);
  const auto& sp = t.shape(positives);
  if (sa != sp) throw ShapeError("contrastive_loss: anchors " + sa.str() + " vs positives " + sp.str());
  if (sa.rows == 0) throw ContractError("contrastive_loss: empty batch");
  if (!(tau > 0)) throw ContractError("contrastive_loss: tau must be > 0");
  const std::size_t n = sa.rows;
  const NodeId sim = t.matmul_nt(t.l2_normalize(anchors), t.l2_normalize(positives));
  const NodeId logp = t.log_softmax(t.scale(sim, T(1.0 / tau)));
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i * n + i;
  return t.scale(t.mean(t.gather(logp, std::move(diag))), T(-1));
}

}  // namespace apam::loss
