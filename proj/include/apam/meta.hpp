#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "apam/checkpoint.hpp"
#include "apam/data.hpp"
#include "apam/errors.hpp"
#include "apam/losses.hpp"
#include "apam/random.hpp"
#include "apam/textmodel.hpp"

namespace apam::meta {

using text::EncoderParams;
using text::ParamGrads;

// ---------------------------------------------------------------------------
// Weight net: v = sigmoid(w2 . relu(w1 * L + b1) + b2), 1 -> 100 -> 1.

struct WeightNet {
  static constexpr std::size_t kHidden = 100;
  static constexpr std::size_t kParams = 3 * kHidden + 1;

  std::vector<double> w1 = std::vector<double>(kHidden, 0.0);
  std::vector<double> b1 = std::vector<double>(kHidden, 0.0);
  std::vector<double> w2 = std::vector<double>(kHidden, 0.0);
  double b2 = 0.0;

  /// Layer 1 ~ U(-1, 1) (fan-in 1), layer 2 ~ U(-0.1, 0.1) (fan-in 100), b2 = 0.
  [[nodiscard]] static WeightNet random(std::uint64_t seed) {
    std::mt19937_64 rng(mix_seed(seed, {0x7E7A}));
    std::uniform_real_distribution<double> u1(-1.0, 1.0);
    std::uniform_real_distribution<double> u2(-0.1, 0.1);
    WeightNet n;
    for (auto& x : n.w1) x = u1(rng);
    for (auto& x : n.b1) x = u1(rng);
    for (auto& x : n.w2) x = u2(rng);
    return n;
  }

  /// Flat order: w1, b1, w2, b2.
  [[nodiscard]] std::vector<double> flat() const {
    std::vector<double> f;
    f.reserve(kParams);
    f.insert(f.end(), w1.begin(), w1.end());
    f.insert(f.end(), b1.begin(), b1.end());
    f.insert(f.end(), w2.begin(), w2.end());
    f.push_back(b2);
    return f;
  }
  [[nodiscard]] static WeightNet from_flat(std::span<const double> f) {
    if (f.size() != kParams) throw ContractError("WeightNet::from_flat: expected " + std::to_string(kParams) + " values");
    WeightNet n;
    std::copy_n(f.begin(), kHidden, n.w1.begin());
    std::copy_n(f.begin() + kHidden, kHidden, n.b1.begin());
    std::copy_n(f.begin() + 2 * kHidden, kHidden, n.w2.begin());
    n.b2 = f.back();
    return n;
  }

  /// Weight for loss L; fills dv/dtheta (flat order) when `jac` is non-empty.
  double forward(double L, std::span<double> jac = {}) const {
    double z = b2;
    for (std::size_t k = 0; k < kHidden; ++k) {
      const double h = w1[k] * L + b1[k];
      if (h > 0) z += w2[k] * h;
    }
    double v = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    // keep weights strictly inside (0,1) even where the sigmoid rounds to an endpoint
    v = std::clamp(v, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
    if (!jac.empty()) {
      const double dz = v * (1.0 - v);
      for (std::size_t k = 0; k < kHidden; ++k) {
        const double h = w1[k] * L + b1[k];
        const bool on = h > 0;
        jac[k] = on ? dz * w2[k] * L : 0.0;
        jac[kHidden + k] = on ? dz * w2[k] : 0.0;
        jac[2 * kHidden + k] = on ? dz * h : 0.0;
      }
      jac[3 * kHidden] = dz;
    }
    return v;
  }

  [[nodiscard]] bool all_finite() const {
    const auto f = flat();
    return std::all_of(f.begin(), f.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const WeightNet&, const WeightNet&) = default;
};

struct Weights {
  std::vector<double> v;                 // n weights in (0,1)
  std::vector<std::vector<double>> jac;  // n rows of dv_i/dtheta
};

[[nodiscard]] inline Weights weight_net_forward(std::span<const double> losses, const WeightNet& theta,
                                                bool with_jacobian = true) {
  Weights w;
  w.v.reserve(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!std::isfinite(losses[i])) {
      throw ContractError("weight_net_forward: loss " + std::to_string(i) + " is not finite");
    }
    std::vector<double> row;
    if (with_jacobian) row.assign(WeightNet::kParams, 0.0);
    w.v.push_back(theta.forward(losses[i], row));
    if (with_jacobian) w.jac.push_back(std::move(row));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double alpha = 0.1;       // inner (virtual) step size
  double beta_meta = 1e-3;  // weight-net step size
  std::optional<double> lr; // step size of the real W update; alpha when unset
  std::size_t steps = 0;    // T
  std::size_t batch_size = 128;  // n
  std::size_t meta_batch_size = 32;  // m
  loss::LossConfig loss;
  bool update_theta = true;
  std::uint64_t seed = 0;

  [[nodiscard]] double w_lr() const { return lr.value_or(alpha); }

  void validate() const {
    if (!(alpha > 0)) throw ConfigError("train: alpha must be > 0");
    if (!(beta_meta > 0)) throw ConfigError("train: beta_meta must be > 0");
    if (lr && !(*lr >= 0)) throw ConfigError("train: lr must be >= 0");
    if (batch_size == 0) throw ConfigError("train: batch size n must be >= 1");
    if (meta_batch_size == 0) throw ConfigError("train: meta batch size m must be >= 1");
    loss.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"beta_meta", c.beta_meta},
                     {"lr", c.w_lr()},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"meta_batch_size", c.meta_batch_size},
                     {"loss", std::string(loss::kind_name(c.loss.kind))},
                     {"epsilon", c.loss.epsilon},
                     {"gamma", c.loss.gamma},
                     {"cb_beta", c.loss.cb_beta},
                     {"update_theta", c.update_theta},
                     {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Batch plumbing

/// Pre-tokenized view of a dataset plus provenance needed for diagnostics.
struct TokenizedSet {
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> ids;
  std::vector<bool> corrupted;

  [[nodiscard]] std::size_t size() const noexcept { return tokens.size(); }
};

[[nodiscard]] inline TokenizedSet tokenize(const data::Dataset& ds, const text::Vocab& vocab) {
  TokenizedSet t;
  for (const auto& e : ds.examples) {
    t.tokens.push_back(vocab.buckets(e.text));
    t.labels.push_back(e.label);
    t.ids.push_back(e.id);
    t.corrupted.push_back(e.corrupted);
  }
  return t;
}

/// Uniform-with-replacement positions for step `step`; `stream` separates the
/// train and meta draws.
[[nodiscard]] inline std::vector<std::size_t> sample_batch(std::uint64_t seed, std::size_t step, char stream,
                                                           std::size_t size, std::size_t population) {
  if (population == 0) throw DataError("cannot sample a batch from an empty set");
  std::vector<std::size_t> b(size);
  for (std::size_t k = 0; k < size; ++k) {
    b[k] = static_cast<std::size_t>(to_index(mix_seed(seed, {step, std::uint64_t(stream), k}), population));
  }
  return b;
}

/// Dropout seed of one example at one step: keyed by id, so order within a batch is irrelevant.
[[nodiscard]] inline std::uint64_t example_seed(std::uint64_t seed, std::size_t step, std::uint64_t id) {
  return mix_seed(seed, {0xD209, step, id});
}

template <class T>
struct LossBatch {
  ad::Tape<T> tape;
  text::BoundModel model;
  ad::NodeId losses = 0;  // n x 1
};

/// Per-example losses of `batch` under `p`; train mode applies dropout.
template <class T>
void build_losses(LossBatch<T>& g, const EncoderParams<T>& p, const TokenizedSet& set,
                  std::span<const std::size_t> batch, const loss::LossConfig& cfg, std::uint64_t seed,
                  std::size_t step, bool train_mode, std::span<const double> cb_weights = {}) {
  g.model = text::bind(g.tape, p, true);
  std::vector<ad::NodeId> rows;
  rows.reserve(batch.size());
  for (std::size_t pos : batch) {
    const auto emb = text::encode(g.tape, g.model, set.tokens[pos], example_seed(seed, step, set.ids[pos]), train_mode);
    rows.push_back(loss::sample_loss(g.tape, cfg, text::classify(g.tape, g.model, emb), set.labels[pos], cb_weights));
  }
  g.losses = g.tape.concat_rows(rows);
}

template <class T>
struct SampleGrads {
  std::vector<double> losses;
  std::vector<ParamGrads<T>> grads;
};

/// L_i and dL_i/dW for each batch position (one reverse sweep per example).
template <class T>
[[nodiscard]] SampleGrads<T> per_sample(const EncoderParams<T>& p, const TokenizedSet& set,
                                        std::span<const std::size_t> batch, const loss::LossConfig& cfg,
                                        std::uint64_t seed, std::size_t step) {
  LossBatch<T> g;
  build_losses(g, p, set, batch, cfg, seed, step, true);
  SampleGrads<T> out;
  for (T v : g.tape.value(g.losses).data()) out.losses.push_back(double(v));
  auto maps = g.tape.per_sample_grads(g.losses, g.model.leaves);
  out.grads.reserve(maps.size());
  for (const auto& m : maps) out.grads.push_back(text::collect(m, g.model));
  return out;
}

template <class T>
[[nodiscard]] ParamGrads<T> weighted_sum(const EncoderParams<T>& p, const std::vector<ParamGrads<T>>& grads,
                                         std::span<const double> v, double scale) {
  if (grads.size() != v.size()) throw ContractError("gradient/weight count mismatch");
  auto acc = text::zeros_like(p, text::kModelTensors);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (v[i] == 0.0) continue;
    text::add_scaled(acc, grads[i], static_cast<T>(scale * v[i]));
  }
  return acc;
}

/// W_hat = W - (alpha/n) * sum_i v_i g_i.
template <class T>
[[nodiscard]] EncoderParams<T> inner_step(const EncoderParams<T>& W, const std::vector<ParamGrads<T>>& grads,
                                          std::span<const double> v, double alpha) {
  for (const auto& g : grads) text::check_alignment(W, g, "inner_step");
  EncoderParams<T> w_hat = W;
  if (alpha == 0.0 || grads.empty()) return w_hat;
  const auto step = weighted_sum(W, grads, v, 1.0 / double(grads.size()));
  auto ts = w_hat.tensors();
  for (std::size_t i = 0; i < step.size(); ++i) ad::axpy(*ts[i], step[i], static_cast<T>(-alpha));
  return w_hat;
}

/// Mean unweighted loss of `batch` (eval mode) and its gradient.
template <class T>
[[nodiscard]] std::pair<double, ParamGrads<T>> mean_loss_grad(const EncoderParams<T>& p, const TokenizedSet& set,
                                                              std::span<const std::size_t> batch,
                                                              const loss::LossConfig& cfg, bool with_grad = true) {
  LossBatch<T> g;
  build_losses(g, p, set, batch, cfg, 0, 0, false);
  const ad::NodeId mean = g.tape.mean(g.losses);
  const double value = double(g.tape.value(mean).item());
  if (!with_grad) return {value, {}};
  return {value, text::collect(g.tape.backward(mean), g.model)};
}

/// grad_theta = -(alpha/n) * sum_i <g_i, g_meta> * dv_i/dtheta.
template <class T>
[[nodiscard]] std::vector<double> meta_grad(const std::vector<ParamGrads<T>>& grads, const Weights& w,
                                           const ParamGrads<T>& g_meta, double alpha) {
  if (grads.size() != w.jac.size()) throw ContractError("meta_grad: gradient/Jacobian count mismatch");
  std::vector<double> out(WeightNet::kParams, 0.0);
  if (grads.empty()) return out;
  const double scale = -alpha / double(grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != g_meta.size()) {
      throw ContractError("meta_grad: per-sample and meta gradients cover different parameters");
    }
    const double d = text::dot(grads[i], g_meta);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += scale * d * w.jac[i][k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  std::size_t step = 0;
  double train_loss = 0;
  std::optional<double> meta_loss;
  std::optional<double> mean_w_clean, mean_w_noisy, mean_w_head, mean_w_tail;
};

template <class T>
struct StepResult {
  EncoderParams<T> W;
  WeightNet theta;
  StepLog log;
};

namespace detail {

struct GroupMean {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  [[nodiscard]] std::optional<double> value() const {
    return n ? std::optional<double>(sum / double(n)) : std::nullopt;
  }
};

inline void check_finite(double x, std::size_t step, const char* stage) {
  if (!std::isfinite(x)) {
    throw NumericError("non-finite value at step " + std::to_string(step) + " in stage " + stage);
  }
}

}  // namespace detail

/// One iteration of the bilevel loop. `head` marks head classes for diagnostics.
template <class T>
[[nodiscard]] StepResult<T> train_step(const EncoderParams<T>& W, const WeightNet& theta, const TokenizedSet& train,
                                       std::span<const std::size_t> batch, const TokenizedSet& meta_set,
                                       std::span<const std::size_t> meta_batch, const TrainConfig& cfg,
                                       std::size_t step, const std::vector<bool>& head = {}) {
  StepResult<T> r;
  r.log.step = step;
  // (1) per-sample losses and gradients at W_t
  const auto sg = per_sample(W, train, batch, cfg.loss, cfg.seed, step);
  double mean_loss = 0;
  for (double l : sg.losses) {
    detail::check_finite(l, step, "train_forward");
    mean_loss += l;
  }
  r.log.train_loss = mean_loss / double(sg.losses.size());

  // (2)-(5) weights, virtual step, meta gradient, theta update
  r.theta = theta;
  if (cfg.update_theta) {
    const auto w = weight_net_forward(sg.losses, theta);
    const auto w_hat = inner_step(W, sg.grads, w.v, cfg.alpha);
    const auto [meta_loss, g_meta] = mean_loss_grad(w_hat, meta_set, meta_batch, cfg.loss);
    detail::check_finite(meta_loss, step, "meta_forward");
    r.log.meta_loss = meta_loss;
    const auto g_theta = meta_grad(sg.grads, w, g_meta, cfg.alpha);
    auto f = theta.flat();
    for (std::size_t k = 0; k < f.size(); ++k) {
      detail::check_finite(g_theta[k], step, "meta_grad");
      f[k] -= cfg.beta_meta * g_theta[k];
    }
    r.theta = WeightNet::from_flat(f);
  }

  // (6) refreshed weights and the real update of W
  const auto v = weight_net_forward(sg.losses, r.theta, false).v;
  r.W = W;
  const auto g = weighted_sum(W, sg.grads, v, 1.0 / double(sg.grads.size()));
  try {
    text::sgd_step(r.W, g, cfg.w_lr());
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(step) + " stage w_update: " + e.what());
  }

  detail::GroupMean clean, noisy, hd, tl;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t pos = batch[i];
    (train.corrupted[pos] ? noisy : clean).add(v[i]);
    if (!head.empty()) (head[train.labels[pos]] ? hd : tl).add(v[i]);
  }
  r.log.mean_w_clean = clean.value();
  r.log.mean_w_noisy = noisy.value();
  r.log.mean_w_head = hd.value();
  r.log.mean_w_tail = tl.value();
  return r;
}

template <class T>
struct TrainResult {
  EncoderParams<T> W;
  WeightNet theta;
  std::vector<StepLog> log;
};

inline void check_disjoint(const data::Dataset& train, const data::Dataset& meta_set) {
  const auto ids = train.ids();
  for (const auto& e : meta_set.examples) {
    if (ids.contains(e.id)) throw ConfigError("train/meta overlap: example id " + std::to_string(e.id));
  }
}

/// T bilevel steps; creates the classification head if the encoder has none.
template <class T>
[[nodiscard]] TrainResult<T> train(const data::Dataset& d_train, const data::Dataset& d_meta, EncoderParams<T> W,
                                   WeightNet theta, const TrainConfig& cfg,
                                   const std::function<void(const StepLog&)>& on_step = {}) {
  cfg.validate();
  check_disjoint(d_train, d_meta);
  if (d_train.size() == 0 || d_meta.size() == 0) throw DataError("train: empty train or meta set");
  if (!W.has_head() || W.num_classes() != d_train.num_classes()) {
    text::init_head(W, d_train.num_classes(), mix_seed(cfg.seed, {0x4EAD}));
  }
  const auto vocab = W.config.vocab();
  const auto train_set = tokenize(d_train, vocab);
  const auto meta_set = tokenize(d_meta, vocab);
  const auto counts = d_train.class_counts();
  const auto head = data::head_classes(counts);

  TrainResult<T> out;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch(cfg.seed, step, 'T', cfg.batch_size, train_set.size());
    const auto mbatch = sample_batch(cfg.seed, step, 'M', cfg.meta_batch_size, meta_set.size());
    auto r = train_step(W, theta, train_set, batch, meta_set, mbatch, cfg, step, head);
    W = std::move(r.W);
    theta = r.theta;
    if (on_step) on_step(r.log);
    out.log.push_back(r.log);
  }
  out.W = std::move(W);
  out.theta = std::move(theta);
  return out;
}

/// Plain mini-batch SGD on the configured loss with the same batch and dropout
/// streams as train(), so runs with and without reweighting are paired.
template <class T>
[[nodiscard]] TrainResult<T> finetune(const data::Dataset& d_train, EncoderParams<T> W, const TrainConfig& cfg,
                                      const std::function<void(const StepLog&)>& on_step = {}) {
  cfg.validate();
  if (d_train.size() == 0) throw DataError("finetune: empty train set");
  if (!W.has_head() || W.num_classes() != d_train.num_classes()) {
    text::init_head(W, d_train.num_classes(), mix_seed(cfg.seed, {0x4EAD}));
  }
  const auto train_set = tokenize(d_train, W.config.vocab());
  const auto counts = d_train.class_counts();
  std::vector<double> cb;
  if (cfg.loss.kind == loss::Kind::class_balanced) cb = loss::class_balanced_weights(counts, cfg.loss.cb_beta);

  TrainResult<T> out;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch(cfg.seed, step, 'T', cfg.batch_size, train_set.size());
    LossBatch<T> g;
    build_losses(g, W, train_set, batch, cfg.loss, cfg.seed, step, true, cb);
    const ad::NodeId mean = g.tape.mean(g.losses);
    StepLog log;
    log.step = step;
    log.train_loss = double(g.tape.value(mean).item());
    detail::check_finite(log.train_loss, step, "train_forward");
    const auto grads = text::collect(g.tape.backward(mean), g.model);
    try {
      text::sgd_step(W, grads, cfg.w_lr());
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + " stage w_update: " + e.what());
    }
    if (on_step) on_step(log);
    out.log.push_back(log);
  }
  out.W = std::move(W);
  return out;
}

// ---------------------------------------------------------------------------
// Final-weight measurement

struct WeightSummary {
  std::optional<double> clean, noisy, head, tail;
  std::vector<double> per_example;
};

/// Weights the final theta assigns to every D_t example, with losses from the
/// final W in eval mode.
template <class T>
[[nodiscard]] WeightSummary final_weights(const data::Dataset& d_train, const EncoderParams<T>& W,
                                          const WeightNet& theta, const loss::LossConfig& cfg) {
  const auto set = tokenize(d_train, W.config.vocab());
  const auto head = data::head_classes(d_train.class_counts());
  WeightSummary s;
  detail::GroupMean clean, noisy, hd, tl;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < set.size(); start += kChunk) {
    std::vector<std::size_t> batch;
    for (std::size_t i = start; i < std::min(set.size(), start + kChunk); ++i) batch.push_back(i);
    LossBatch<T> g;
    build_losses(g, W, set, batch, cfg, 0, 0, false);
    const auto& L = g.tape.value(g.losses);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const double v = theta.forward(double(L[k]));
      s.per_example.push_back(v);
      (set.corrupted[batch[k]] ? noisy : clean).add(v);
      (head[set.labels[batch[k]]] ? hd : tl).add(v);
    }
  }
  s.clean = clean.value();
  s.noisy = noisy.value();
  s.head = hd.value();
  s.tail = tl.value();
  return s;
}

// ---------------------------------------------------------------------------
// IO

inline void write_log_csv(const std::string& path, const std::vector<StepLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "step,train_loss,meta_loss,mean_w_clean,mean_w_noisy,mean_w_head,mean_w_tail\n";
  auto cell = [&](const std::optional<double>& v) {
    out << ',';
    if (v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", *v);
      out << buf;
    }
  };
  for (const auto& s : log) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", s.train_loss);
    out << s.step << ',' << buf;
    cell(s.meta_loss);
    cell(s.mean_w_clean);
    cell(s.mean_w_noisy);
    cell(s.mean_w_head);
    cell(s.mean_w_tail);
    out << '\n';
  }
}

[[nodiscard]] inline std::vector<ckpt::Record> to_records(const WeightNet& n) {
  auto vec = [](const std::vector<double>& v) { return ad::Tensor<double>(ad::Shape{1, v.size()}, v); };
  return {ckpt::make_record("weightnet.w1", vec(n.w1)), ckpt::make_record("weightnet.b1", vec(n.b1)),
          ckpt::make_record("weightnet.w2", vec(n.w2)),
          ckpt::make_record("weightnet.b2", ad::Tensor<double>::scalar(n.b2))};
}

[[nodiscard]] inline std::optional<WeightNet> from_records(const std::vector<ckpt::Record>& records) {
  const auto* w1 = ckpt::find(records, "weightnet.w1");
  if (!w1) return std::nullopt;
  auto get = [&](const char* name) {
    const auto* r = ckpt::find(records, name);
    if (!r) throw DataError(std::string("checkpoint is missing ") + name);
    return ckpt::record_tensor<double>(*r).storage();
  };
  WeightNet n;
  n.w1 = get("weightnet.w1");
  n.b1 = get("weightnet.b1");
  n.w2 = get("weightnet.w2");
  n.b2 = get("weightnet.b2").at(0);
  if (n.w1.size() != WeightNet::kHidden || n.b1.size() != WeightNet::kHidden || n.w2.size() != WeightNet::kHidden) {
    throw DataError("checkpoint weight net has the wrong hidden width");
  }
  return n;
}

}  // namespace apam::meta
