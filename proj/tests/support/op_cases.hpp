#pragma once

// Randomized finite-difference cases, one generator per tape op. Each case
// reduces the op output to a scalar with a fixed random weighting so every
// output entry contributes to the checked gradient.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gradcheck.hpp"

namespace apam::testing {

struct OpCase {
  GraphFn fn;
  std::vector<Tensor<double>> inputs;
};

struct OpCaseGenerator {
  std::string name;
  std::function<OpCase(std::mt19937_64&)> make;
};

/// sum_i c_i * x_i with fixed, distinct, non-zero weights c_i.
inline NodeId weighted_sum(Tape<double>& t, NodeId x) {
  Tensor<double> w(t.shape(x));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.5 + std::sin(1.7 * double(i) + 0.3);
  return t.sum(t.mul(x, t.constant(std::move(w))));
}

inline std::vector<OpCaseGenerator> op_case_generators() {
  auto dim = [](std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::vector<OpCaseGenerator> gens;

  auto unary_case = [dim](auto build, bool positive, bool away_from_zero) {
    return [=](std::mt19937_64& rng) {
      ad::Shape s{dim(rng, 1, 3), dim(rng, 1, 4)};
      Tensor<double> x = positive ? random_tensor(rng, s, 0.5, 2.0)
                                  : (away_from_zero ? random_nonzero(rng, s) : random_tensor(rng, s, -2, 2));
      OpCase c;
      c.inputs = {x};
      c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) { return weighted_sum(t, build(t, in[0])); };
      return c;
    };
  };

  gens.push_back({"matmul", [dim](std::mt19937_64& rng) {
                    const std::size_t m = dim(rng, 1, 3), k = dim(rng, 1, 4), n = dim(rng, 1, 3);
                    OpCase c;
                    c.inputs = {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      return weighted_sum(t, t.matmul(in[0], in[1]));
                    };
                    return c;
                  }});
  gens.push_back({"matmul_nt", [dim](std::mt19937_64& rng) {
                    const std::size_t m = dim(rng, 1, 3), k = dim(rng, 1, 4), n = dim(rng, 1, 3);
                    OpCase c;
                    c.inputs = {random_tensor(rng, {m, k}), random_tensor(rng, {n, k})};
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      return weighted_sum(t, t.matmul_nt(in[0], in[1]));
                    };
                    return c;
                  }});
  gens.push_back({"transpose", unary_case([](Tape<double>& t, NodeId x) { return t.transpose(t.transpose(x)); },
                                          false, false)});
  for (const char* name : {"add", "sub", "mul"}) {
    const std::string op = name;
    gens.push_back({op, [dim, op](std::mt19937_64& rng) {
                      ad::Shape s{dim(rng, 1, 3), dim(rng, 1, 4)};
                      OpCase c;
                      c.inputs = {random_tensor(rng, s), random_tensor(rng, s)};
                      c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                        NodeId y = op == "add" ? t.add(in[0], in[1])
                                   : op == "sub" ? t.sub(in[0], in[1])
                                                 : t.mul(in[0], in[1]);
                        return weighted_sum(t, y);
                      };
                      return c;
                    }});
  }
  gens.push_back({"add_scalar", unary_case([](Tape<double>& t, NodeId x) { return t.add_scalar(x, 0.7); }, false, false)});
  gens.push_back({"scale", unary_case([](Tape<double>& t, NodeId x) { return t.scale(x, -1.3); }, false, false)});
  gens.push_back({"relu", unary_case([](Tape<double>& t, NodeId x) { return t.relu(x); }, false, true)});
  gens.push_back({"sigmoid", unary_case([](Tape<double>& t, NodeId x) { return t.sigmoid(x); }, false, false)});
  gens.push_back({"log", unary_case([](Tape<double>& t, NodeId x) { return t.log(x); }, true, false)});
  gens.push_back({"exp", unary_case([](Tape<double>& t, NodeId x) { return t.exp(x); }, false, false)});
  gens.push_back({"pow", unary_case([](Tape<double>& t, NodeId x) { return t.pow(x, 2.5); }, true, false)});
  gens.push_back({"mean", [dim](std::mt19937_64& rng) {
                    OpCase c;
                    c.inputs = {random_tensor(rng, {dim(rng, 1, 3), dim(rng, 1, 4)})};
                    c.fn = [](Tape<double>& t, const std::vector<NodeId>& in) {
                      return t.mean(t.mul(in[0], in[0]));
                    };
                    return c;
                  }});
  gens.push_back({"sum", [dim](std::mt19937_64& rng) {
                    OpCase c;
                    c.inputs = {random_tensor(rng, {dim(rng, 1, 3), dim(rng, 1, 4)})};
                    c.fn = [](Tape<double>& t, const std::vector<NodeId>& in) {
                      return t.sum(t.mul(in[0], in[0]));
                    };
                    return c;
                  }});
  gens.push_back({"mean_rows", unary_case([](Tape<double>& t, NodeId x) { return t.mean_rows(x); }, false, false)});
  gens.push_back({"softmax", unary_case([](Tape<double>& t, NodeId x) { return t.softmax(x); }, false, false)});
  gens.push_back({"log_softmax", unary_case([](Tape<double>& t, NodeId x) { return t.log_softmax(x); }, false, false)});
  gens.push_back({"l2_normalize", [dim](std::mt19937_64& rng) {
                    ad::Shape s{dim(rng, 1, 3), dim(rng, 2, 4)};
                    OpCase c;
                    c.inputs = {random_tensor(rng, s, 0.2, 1.5)};
                    for (auto& v : c.inputs[0].data()) v *= (std::bernoulli_distribution(0.5)(rng) ? 1 : -1);
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      return weighted_sum(t, t.l2_normalize(in[0]));
                    };
                    return c;
                  }});
  gens.push_back({"dropout", [dim](std::mt19937_64& rng) {
                    ad::Shape s{dim(rng, 1, 3), dim(rng, 1, 5)};
                    const double p = std::uniform_real_distribution<double>(0.0, 0.8)(rng);
                    const std::uint64_t seed = rng();
                    OpCase c;
                    c.inputs = {random_tensor(rng, s)};
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      return weighted_sum(t, t.dropout(in[0], p, seed));
                    };
                    return c;
                  }});
  gens.push_back({"embedding_lookup", [dim](std::mt19937_64& rng) {
                    const std::size_t rows = dim(rng, 2, 6), d = dim(rng, 1, 4), k = dim(rng, 1, 5);
                    std::vector<std::size_t> ids(k);
                    for (auto& i : ids) i = dim(rng, 0, rows - 1);
                    OpCase c;
                    c.inputs = {random_tensor(rng, {rows, d})};
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      return weighted_sum(t, t.embedding_lookup(in[0], ids));
                    };
                    return c;
                  }});
  gens.push_back({"concat_rows", [dim](std::mt19937_64& rng) {
                    const std::size_t d = dim(rng, 1, 4), r1 = dim(rng, 1, 3), r2 = dim(rng, 1, 3);
                    OpCase c;
                    c.inputs = {random_tensor(rng, {r1, d}), random_tensor(rng, {r2, d})};
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      const NodeId parts[] = {in[0], in[1]};
                      return weighted_sum(t, t.concat_rows(parts));
                    };
                    return c;
                  }});
  gens.push_back({"gather", [dim](std::mt19937_64& rng) {
                    ad::Shape s{dim(rng, 1, 3), dim(rng, 1, 4)};
                    const std::size_t k = dim(rng, 1, 6);
                    std::vector<std::size_t> pos(k);
                    for (auto& p : pos) p = dim(rng, 0, s.size() - 1);
                    OpCase c;
                    c.inputs = {random_tensor(rng, s)};
                    c.fn = [=](Tape<double>& t, const std::vector<NodeId>& in) {
                      return weighted_sum(t, t.gather(in[0], pos));
                    };
                    return c;
                  }});
  return gens;
}

}  // namespace apam::testing
