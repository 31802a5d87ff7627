#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "apam/autodiff/tape.hpp"
#include "apam/checkpoint.hpp"
#include "apam/errors.hpp"
#include "apam/random.hpp"

namespace apam::text {

using ad::Grad;
using ad::NodeId;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

// ---------------------------------------------------------------------------
// Vocabulary: hashed buckets over a whitespace + punctuation tokenizer.

struct Vocab {
  std::size_t hash_buckets = std::size_t{1} << 15;
  bool lowercase = true;

  /// Splits on whitespace; every ASCII punctuation character is its own token.
  [[nodiscard]] std::vector<std::string> tokenize(std::string_view text) const {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto u = static_cast<unsigned char>(ch);
      if (u < 0x80 && std::isspace(u)) {
        flush();
      } else if (u < 0x80 && std::ispunct(u)) {
        flush();
        out.emplace_back(1, ch);
      } else {
        cur.push_back(lowercase && u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
      }
    }
    flush();
    return out;
  }

  /// FNV-1a 64 of the token bytes, reduced modulo the bucket count.
  [[nodiscard]] std::size_t bucket(std::string_view token) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : token) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h % hash_buckets);
  }

  [[nodiscard]] std::vector<std::size_t> buckets(std::string_view text) const {
    auto toks = tokenize(text);
    if (toks.empty()) throw IngestError("text has no tokens: \"" + std::string(text) + "\"");
    std::vector<std::size_t> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(bucket(t));
    return ids;
  }
};

// ---------------------------------------------------------------------------
// Encoder parameters.

struct ModelConfig {
  std::size_t hash_buckets = std::size_t{1} << 15;
  std::size_t dim = 128;
  std::size_t hidden1 = 256;
  std::size_t hidden2 = 128;
  double dropout_p = 0.1;
  bool lowercase = true;

  [[nodiscard]] Vocab vocab() const { return Vocab{hash_buckets, lowercase}; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"hash_buckets", c.hash_buckets}, {"dim", c.dim},         {"hidden1", c.hidden1},
                     {"hidden2", c.hidden2},           {"dropout_p", c.dropout_p}, {"lowercase", c.lowercase}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.hash_buckets = j.value("hash_buckets", d.hash_buckets);
  c.dim = j.value("dim", d.dim);
  c.hidden1 = j.value("hidden1", d.hidden1);
  c.hidden2 = j.value("hidden2", d.hidden2);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.lowercase = j.value("lowercase", d.lowercase);
}

inline constexpr std::size_t kEncoderTensors = 5;  // embedding + fc1 + fc2
inline constexpr std::size_t kModelTensors = 7;    // ... + classification head
inline constexpr std::array<std::string_view, kModelTensors> kTensorNames = {
    "embedding", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "head.weight", "head.bias"};

/// Embedding table, two fully connected layers and (after fine-tuning starts)
/// a classification head. Dropout follows pooling and fc1 in train mode.
template <class T>
struct EncoderParams {
  ModelConfig config;
  Tensor<T> embedding;  // hash_buckets x dim
  Tensor<T> fc1_w;      // dim x hidden1
  Tensor<T> fc1_b;      // 1 x hidden1
  Tensor<T> fc2_w;      // hidden1 x hidden2
  Tensor<T> fc2_b;      // 1 x hidden2
  Tensor<T> head_w;     // hidden2 x C (empty before the head exists)
  Tensor<T> head_b;     // 1 x C

  [[nodiscard]] std::size_t num_classes() const noexcept { return head_b.cols(); }
  [[nodiscard]] bool has_head() const noexcept { return head_b.size() > 0; }
  [[nodiscard]] std::size_t tensor_count() const noexcept { return has_head() ? kModelTensors : kEncoderTensors; }

  [[nodiscard]] std::array<Tensor<T>*, kModelTensors> tensors() noexcept {
    return {&embedding, &fc1_w, &fc1_b, &fc2_w, &fc2_b, &head_w, &head_b};
  }
  [[nodiscard]] std::array<const Tensor<T>*, kModelTensors> tensors() const noexcept {
    return {&embedding, &fc1_w, &fc1_b, &fc2_w, &fc2_b, &head_w, &head_b};
  }

  [[nodiscard]] bool all_finite() const {
    for (std::size_t i = 0; i < tensor_count(); ++i)
      if (!tensors()[i]->all_finite()) return false;
    return true;
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

/// Gradients aligned with EncoderParams::tensors() (5 entries without the head, 7 with).
template <class T>
using ParamGrads = std::vector<Grad<T>>;

namespace detail {

template <class T>
Tensor<T> uniform_tensor(std::mt19937_64& rng, Shape s, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace detail

/// Embedding ~ N(0,1); affine layers ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
[[nodiscard]] EncoderParams<T> init_encoder(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.hash_buckets == 0 || cfg.dim == 0 || cfg.hidden1 == 0 || cfg.hidden2 == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (!(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0,1)");
  std::mt19937_64 rng(mix_seed(seed, {0xE1}));
  EncoderParams<T> p;
  p.config = cfg;
  std::normal_distribution<double> normal(0.0, 1.0);
  p.embedding = Tensor<T>(Shape{cfg.hash_buckets, cfg.dim});
  for (auto& v : p.embedding.data()) v = static_cast<T>(normal(rng));
  const double b1 = 1.0 / std::sqrt(double(cfg.dim));
  const double b2 = 1.0 / std::sqrt(double(cfg.hidden1));
  p.fc1_w = detail::uniform_tensor<T>(rng, {cfg.dim, cfg.hidden1}, b1);
  p.fc1_b = detail::uniform_tensor<T>(rng, {1, cfg.hidden1}, b1);
  p.fc2_w = detail::uniform_tensor<T>(rng, {cfg.hidden1, cfg.hidden2}, b2);
  p.fc2_b = detail::uniform_tensor<T>(rng, {1, cfg.hidden2}, b2);
  return p;
}

/// (Re)creates the classification head for `num_classes` classes.
template <class T>
void init_head(EncoderParams<T>& p, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes == 0) throw ConfigError("classification head needs at least one class");
  std::mt19937_64 rng(mix_seed(seed, {0xAEAD}));
  const double b = 1.0 / std::sqrt(double(p.config.hidden2));
  p.head_w = detail::uniform_tensor<T>(rng, {p.config.hidden2, num_classes}, b);
  p.head_b = detail::uniform_tensor<T>(rng, {1, num_classes}, b);
}

/// Parameter leaves of one tape, in EncoderParams::tensors() order.
struct BoundModel {
  std::vector<NodeId> leaves;
  double dropout_p = 0.0;
  [[nodiscard]] bool has_head() const noexcept { return leaves.size() == kModelTensors; }
};

/// Binds parameters on `tape` without copying; `p` must outlive the tape.
template <class T>
[[nodiscard]] BoundModel bind(Tape<T>& tape, const EncoderParams<T>& p, bool with_head) {
  if (with_head && !p.has_head()) throw ContractError("bind: model has no classification head");
  BoundModel b;
  b.dropout_p = p.config.dropout_p;
  const auto ts = p.tensors();
  const std::size_t n = with_head ? kModelTensors : kEncoderTensors;
  for (std::size_t i = 0; i < n; ++i) b.leaves.push_back(tape.bind(*ts[i], i == 0));
  return b;
}

/// s = fc2(dropout(relu(fc1(dropout(mean_pool(embed(tokens))))))) -> 1 x hidden2.
template <class T>
[[nodiscard]] NodeId encode(Tape<T>& tape, const BoundModel& m, std::vector<std::size_t> token_buckets,
                            std::uint64_t dropout_seed, bool train_mode) {
  if (token_buckets.empty()) throw IngestError("encode: empty token list");
  NodeId x = tape.mean_rows(tape.embedding_lookup(m.leaves[0], std::move(token_buckets)));
  if (train_mode) x = tape.dropout(x, m.dropout_p, mix_seed(dropout_seed, {1}));
  NodeId h = tape.relu(tape.add(tape.matmul(x, m.leaves[1]), m.leaves[2]));
  if (train_mode) h = tape.dropout(h, m.dropout_p, mix_seed(dropout_seed, {2}));
  return tape.add(tape.matmul(h, m.leaves[3]), m.leaves[4]);
}

/// logits = head(relu(s)) -> 1 x C.
template <class T>
[[nodiscard]] NodeId classify(Tape<T>& tape, const BoundModel& m, NodeId embedding) {
  if (!m.has_head()) throw ContractError("classify: model bound without a head");
  const auto& s = tape.shape(embedding);
  const auto& w = tape.shape(m.leaves[5]);
  if (s.rows != 1 || s.cols != w.rows) {
    throw ShapeError("classify: embedding " + s.str() + " does not match head " + w.str());
  }
  return tape.add(tape.matmul(tape.relu(embedding), m.leaves[5]), m.leaves[6]);
}

/// Value-level encode of one text.
template <class T>
[[nodiscard]] Tensor<T> encode(const EncoderParams<T>& p, std::string_view text, std::uint64_t dropout_seed,
                               bool train_mode) {
  Tape<T> tape;
  const BoundModel m = bind(tape, p, false);
  return tape.value(encode(tape, m, p.config.vocab().buckets(text), dropout_seed, train_mode));
}

/// Value-level logits for an embedding.
template <class T>
[[nodiscard]] Tensor<T> classify(const EncoderParams<T>& p, const Tensor<T>& embedding) {
  Tape<T> tape;
  const BoundModel m = bind(tape, p, true);
  return tape.value(classify(tape, m, tape.constant(embedding)));
}

/// Eval-mode logits for one text.
template <class T>
[[nodiscard]] Tensor<T> logits(const EncoderParams<T>& p, std::string_view text) {
  Tape<T> tape;
  const BoundModel m = bind(tape, p, true);
  return tape.value(classify(tape, m, encode(tape, m, p.config.vocab().buckets(text), 0, false)));
}

template <class T>
[[nodiscard]] ParamGrads<T> collect(const ad::GradMap<T>& g, const BoundModel& m) {
  ParamGrads<T> out;
  out.reserve(m.leaves.size());
  for (NodeId id : m.leaves) out.push_back(g.at(id));
  return out;
}

template <class T>
void check_alignment(const EncoderParams<T>& p, const ParamGrads<T>& g, std::string_view who) {
  if (g.size() != kEncoderTensors && g.size() != kModelTensors) {
    throw ContractError(std::string(who) + ": gradient map has " + std::to_string(g.size()) + " entries");
  }
  if (g.size() > p.tensor_count()) throw ContractError(std::string(who) + ": gradients for a missing head");
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].shape() != ts[i]->shape()) {
      throw ContractError(std::string(who) + ": gradient for " + std::string(kTensorNames[i]) + " has shape " +
                          g[i].shape().str() + ", parameter is " + ts[i]->shape().str());
    }
  }
}

/// params -= lr * grads, for every tensor the gradient map covers.
template <class T>
void sgd_step(EncoderParams<T>& p, const ParamGrads<T>& g, double lr) {
  if (!(lr >= 0.0)) throw ConfigError("sgd_step: learning rate must be non-negative");
  check_alignment(p, g, "sgd_step");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g[i].all_finite()) {
      throw NumericError("sgd_step: non-finite gradient in layer " + std::string(kTensorNames[i]));
    }
  }
  if (lr == 0.0) return;
  auto ts = p.tensors();
  for (std::size_t i = 0; i < g.size(); ++i) ad::axpy(*ts[i], g[i], static_cast<T>(-lr));
}

// ---- gradient algebra over aligned maps ----

template <class T>
[[nodiscard]] double dot(const ParamGrads<T>& a, const ParamGrads<T>& b) {
  if (a.size() != b.size()) throw ContractError("dot: gradient maps cover different parameters");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += ad::dot(a[i], b[i]);
  return acc;
}

template <class T>
[[nodiscard]] ParamGrads<T> zeros_like(const EncoderParams<T>& p, std::size_t count) {
  ParamGrads<T> g;
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < count; ++i) g.emplace_back(ts[i]->shape(), i == 0);
  return g;
}

template <class T>
void add_scaled(ParamGrads<T>& acc, const ParamGrads<T>& g, T scale) {
  if (acc.size() != g.size()) throw ContractError("add_scaled: gradient maps cover different parameters");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i].add_scaled(g[i], scale);
}

// ---- checkpoint records ----

template <class T>
[[nodiscard]] std::vector<ckpt::Record> to_records(const EncoderParams<T>& p) {
  std::vector<ckpt::Record> out;
  out.push_back(ckpt::make_text_record("model.config", nlohmann::json(p.config).dump()));
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < p.tensor_count(); ++i) {
    out.push_back(ckpt::make_record(std::string(kTensorNames[i]), *ts[i]));
  }
  return out;
}

template <class T>
[[nodiscard]] EncoderParams<T> from_records(const std::vector<ckpt::Record>& records) {
  const auto* cfg = ckpt::find(records, "model.config");
  if (!cfg) throw DataError("checkpoint has no model.config record");
  EncoderParams<T> p;
  p.config = nlohmann::json::parse(ckpt::record_text(*cfg)).get<ModelConfig>();
  auto ts = p.tensors();
  for (std::size_t i = 0; i < kModelTensors; ++i) {
    const auto* r = ckpt::find(records, std::string(kTensorNames[i]));
    if (!r) {
      if (i < kEncoderTensors) throw DataError("checkpoint is missing tensor " + std::string(kTensorNames[i]));
      continue;
    }
    *ts[i] = ckpt::record_tensor<T>(*r);
  }
  if (p.embedding.shape() != Shape{p.config.hash_buckets, p.config.dim} ||
      p.fc1_w.shape() != Shape{p.config.dim, p.config.hidden1} ||
      p.fc2_w.shape() != Shape{p.config.hidden1, p.config.hidden2}) {
    throw DataError("checkpoint tensors do not match model.config");
  }
  if (p.head_w.size() != p.head_b.size() * p.config.hidden2) throw DataError("checkpoint head is malformed");
  return p;
}

}  // namespace apam::text
