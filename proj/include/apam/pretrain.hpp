#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "apam/errors.hpp"
#include "apam/losses.hpp"
#include "apam/random.hpp"
#include "apam/textmodel.hpp"

namespace apam::pretrain {

using text::EncoderParams;

struct PretrainConfig {
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  double tau = 0.05;
  std::optional<double> dropout_p;  // overrides the encoder's rate when set
  double lr = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ConfigError("pretrain: batch_size must be >= 1");
    if (!(tau > 0)) throw ConfigError("pretrain: tau must be > 0");
    if (dropout_p && !(*dropout_p >= 0 && *dropout_p < 1)) throw ConfigError("pretrain: dropout_p must lie in [0,1)");
    if (!(lr >= 0)) throw ConfigError("pretrain: lr must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size}, {"epochs", c.epochs}, {"tau", c.tau}, {"lr", c.lr}, {"seed", c.seed}};
  j["dropout_p"] = c.dropout_p ? nlohmann::json(*c.dropout_p) : nlohmann::json(nullptr);
}
inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.tau = j.value("tau", d.tau);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
  c.dropout_p = j.contains("dropout_p") && !j["dropout_p"].is_null() ? std::optional(j["dropout_p"].get<double>())
                                                                    : std::nullopt;
}

/// Dropout seeds of the two views of corpus item `index`.
[[nodiscard]] inline std::pair<std::uint64_t, std::uint64_t> view_seeds(std::uint64_t seed, std::uint64_t index) {
  return {mix_seed(seed, {index, 0xA}), mix_seed(seed, {index, 0xB})};
}

/// Two train-mode encodings of the same text under independent dropout masks.
template <class T>
[[nodiscard]] std::pair<ad::Tensor<T>, ad::Tensor<T>> make_views(const EncoderParams<T>& p, std::string_view text,
                                                                 std::uint64_t seed, std::uint64_t index) {
  const auto [a, b] = view_seeds(seed, index);
  return {text::encode(p, text, a, true), text::encode(p, text, b, true)};
}

template <class T>
[[nodiscard]] double cosine(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * double(b[i]);
    aa += double(a[i]) * double(a[i]);
    bb += double(b[i]) * double(b[i]);
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

/// Mean cosine similarity between the two views over `texts`.
template <class T>
[[nodiscard]] double mean_pair_cosine(const EncoderParams<T>& p, const std::vector<std::string>& texts,
                                      std::uint64_t seed) {
  if (texts.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto [a, b] = make_views(p, texts[i], seed, i);
    acc += cosine(a, b);
  }
  return acc / double(texts.size());
}

template <class T>
struct PretrainResult {
  EncoderParams<T> encoder;
  std::vector<double> epoch_loss;  // mean batch loss per epoch, measured before each update
  std::size_t steps = 0;
};

/// Contrastive loss of one mini-batch (corpus positions `batch`) on a fresh tape.
template <class T>
struct BatchGraph {
  ad::Tape<T> tape;
  text::BoundModel model;
  ad::NodeId loss = 0;
};

template <class T>
void build_batch(BatchGraph<T>& g, const EncoderParams<T>& p, const std::vector<std::vector<std::size_t>>& tokens,
                 std::span<const std::size_t> batch, std::uint64_t seed, double tau) {
  g.model = text::bind(g.tape, p, false);
  std::vector<ad::NodeId> anchors, positives;
  anchors.reserve(batch.size());
  positives.reserve(batch.size());
  for (std::size_t idx : batch) {
    const auto [sa, sb] = view_seeds(seed, idx);
    anchors.push_back(text::encode(g.tape, g.model, tokens[idx], sa, true));
    positives.push_back(text::encode(g.tape, g.model, tokens[idx], sb, true));
  }
  g.loss = loss::contrastive_loss(g.tape, g.tape.concat_rows(anchors), g.tape.concat_rows(positives), tau);
}

/// SGD on the in-batch contrastive loss. The corpus is shuffled once per run and
/// split into floor(|corpus| / N) batches (the partial tail batch is dropped);
/// each corpus item keeps the same view seeds across epochs.
template <class T>
[[nodiscard]] PretrainResult<T> pretrain(const std::vector<std::string>& corpus, EncoderParams<T> encoder,
                                         const PretrainConfig& cfg,
                                         const std::function<void(std::size_t, double)>& on_epoch = {}) {
  cfg.validate();
  if (corpus.size() < cfg.batch_size) {
    throw ConfigError("pretrain: corpus has " + std::to_string(corpus.size()) + " texts, fewer than one batch of " +
                      std::to_string(cfg.batch_size));
  }
  if (cfg.dropout_p) encoder.config.dropout_p = *cfg.dropout_p;
  const auto vocab = encoder.config.vocab();
  std::vector<std::vector<std::size_t>> tokens;
  tokens.reserve(corpus.size());
  for (const auto& s : corpus) tokens.push_back(vocab.buckets(s));

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(cfg.seed, {0x5EED}));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t batches = corpus.size() / cfg.batch_size;

  PretrainResult<T> out;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::span<const std::size_t> batch(order.data() + b * cfg.batch_size, cfg.batch_size);
      BatchGraph<T> g;
      build_batch(g, encoder, tokens, batch, cfg.seed, cfg.tau);
      const double l = double(g.tape.value(g.loss).item());
      if (!std::isfinite(l)) {
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                           std::to_string(b));
      }
      total += l;
      if (cfg.lr > 0) {
        const auto grads = text::collect(g.tape.backward(g.loss), g.model);
        text::sgd_step(encoder, grads, cfg.lr);
      }
      ++out.steps;
    }
    out.epoch_loss.push_back(total / double(batches));
    if (on_epoch) on_epoch(epoch + 1, out.epoch_loss.back());
  }
  out.encoder = std::move(encoder);
  return out;
}

// ---- corpus and trace IO ----

/// Texts from a JSONL dataset (the `text` field; labels ignored) or a plain
/// text file with one sentence per line. Blank lines are skipped.
[[nodiscard]] inline std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open corpus '" + path + "'");
  const bool jsonl = path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl";
  std::vector<std::string> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    if (!jsonl) {
      out.push_back(line);
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        throw IngestError("corpus line " + std::to_string(no) + ": field 'text' missing or not a string");
      }
      out.push_back(j["text"].get<std::string>());
    } catch (const nlohmann::json::parse_error& e) {
      throw IngestError("corpus line " + std::to_string(no) + ": malformed JSON (" + e.what() + ")");
    }
  }
  if (out.empty()) throw IngestError("corpus '" + path + "' has no texts");
  return out;
}

inline void write_loss_trace(const std::string& path, const std::vector<double>& epoch_loss) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", e + 1, epoch_loss[e]);
    out << buf;
  }
}

}  // namespace apam::pretrain
