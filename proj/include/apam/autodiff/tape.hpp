#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apam/autodiff/tensor.hpp"
#include "apam/errors.hpp"
#include "apam/random.hpp"

namespace apam::ad {

using NodeId = std::size_t;

enum class Op : std::uint8_t {
  leaf,
  matmul,
  matmul_nt,
  transpose,
  add,
  sub,
  mul,
  add_scalar,
  scale,
  relu,
  sigmoid,
  log,
  exp,
  pow,
  mean,
  mean_rows,
  sum,
  softmax,
  log_softmax,
  l2_normalize,
  dropout,
  embedding_lookup,
  concat_rows,
  gather,
};

[[nodiscard]] constexpr std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::transpose: return "transpose";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::add_scalar: return "add_scalar";
    case Op::scale: return "scale";
    case Op::relu: return "relu";
    case Op::sigmoid: return "sigmoid";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::pow: return "pow";
    case Op::mean: return "mean";
    case Op::mean_rows: return "mean_rows";
    case Op::sum: return "sum";
    case Op::softmax: return "softmax";
    case Op::log_softmax: return "log_softmax";
    case Op::l2_normalize: return "l2_normalize";
    case Op::dropout: return "dropout";
    case Op::embedding_lookup: return "embedding_lookup";
    case Op::concat_rows: return "concat_rows";
    case Op::gather: return "gather";
  }
  return "?";
}

template <class T>
struct TensorNode {
  Op op = Op::leaf;
  Shape shape;
  Tensor<T> value;                    // owned value (unused when `bound` is set)
  const Tensor<T>* bound = nullptr;   // non-owning parameter storage
  std::vector<NodeId> parents;
  bool is_parameter = false;
  bool needs_grad = false;
  bool sparse_grad = false;           // accumulate row-sparse (embedding tables)
  T attr = T(0);
  std::vector<std::size_t> index;     // token rows / gather positions
  std::vector<T> aux;                 // dropout multipliers, row norms

  // Gradient accumulators, valid while has_grad.
  bool has_grad = false;
  std::vector<T> grad;
  std::vector<std::size_t> grad_rows;
  std::vector<T> grad_row_values;
  std::vector<std::uint32_t> row_slot;

  [[nodiscard]] const Tensor<T>& val() const noexcept { return bound ? *bound : value; }
};

template <class T>
using GradMap = std::map<NodeId, Grad<T>>;

/// Append-only reverse-mode tape over 2-D tensors.
///
/// Node ids are creation order, so parents always precede children and a
/// reverse sweep over ids is a valid topological order. Leaves created with
/// `bind` reference caller storage, which must outlive the
/// tape. A tape is single-writer.
template <class T>
class Tape {
 public:
  explicit Tape(std::uint64_t seed = 0) : rng_state_(seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] const TensorNode<T>& node(NodeId id) const { return nodes_.at(id); }
  [[nodiscard]] const Tensor<T>& value(NodeId id) const { return nodes_.at(id).val(); }
  [[nodiscard]] const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }

  /// Next seed from the tape's own generator (for callers without explicit seeds).
  std::uint64_t next_seed() noexcept {
    rng_state_ = splitmix64(rng_state_);
    return rng_state_;
  }

  // ---- leaves ----

  NodeId constant(Tensor<T> value) {
    TensorNode<T> n;
    n.shape = value.shape();
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId parameter(Tensor<T> value, bool sparse_grad = false) {
    TensorNode<T> n;
    n.shape = value.shape();
    n.value = std::move(value);
    n.is_parameter = n.needs_grad = true;
    n.sparse_grad = sparse_grad;
    return push(std::move(n));
  }

  /// Parameter leaf referencing external storage (no copy).
  NodeId bind(const Tensor<T>& storage, bool sparse_grad = false) {
    TensorNode<T> n;
    n.shape = storage.shape();
    n.bound = &storage;
    n.is_parameter = n.needs_grad = true;
    n.sparse_grad = sparse_grad;
    return push(std::move(n));
  }
  NodeId bind_sparse(const Tensor<T>& storage) { return bind(storage, true); }

  // ---- operations ----

  NodeId matmul(NodeId a, NodeId b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.cols != sb.rows) shape_error(Op::matmul, sa, sb);
    Tensor<T> out(Shape{sa.rows, sb.cols});
    gemm_nn(value(a), value(b), out);
    return push_op(Op::matmul, std::move(out), {a, b});
  }

  /// a * b^T
  NodeId matmul_nt(NodeId a, NodeId b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.cols != sb.cols) shape_error(Op::matmul_nt, sa, sb);
    const auto& A = value(a);
    const auto& B = value(b);
    Tensor<T> out(Shape{sa.rows, sb.rows});
    for (std::size_t i = 0; i < sa.rows; ++i) {
      for (std::size_t j = 0; j < sb.rows; ++j) {
        T acc = 0;
        for (std::size_t k = 0; k < sa.cols; ++k) acc += A.at(i, k) * B.at(j, k);
        out.at(i, j) = acc;
      }
    }
    return push_op(Op::matmul_nt, std::move(out), {a, b});
  }

  NodeId transpose(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(Shape{A.cols(), A.rows()});
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out.at(j, i) = A.at(i, j);
    return push_op(Op::transpose, std::move(out), {a});
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b, [](T x, T y) { return x + y; }); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b, [](T x, T y) { return x - y; }); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b, [](T x, T y) { return x * y; }); }

  NodeId add_scalar(NodeId a, T c) {
    return unary(Op::add_scalar, a, [c](T x) { return x + c; }, c);
  }
  NodeId scale(NodeId a, T c) {
    return unary(Op::scale, a, [c](T x) { return c * x; }, c);
  }
  NodeId relu(NodeId a) {
    return unary(Op::relu, a, [](T x) { return x > T(0) ? x : T(0); });
  }
  NodeId sigmoid(NodeId a) {
    return unary(Op::sigmoid, a, [](T x) { return stable_sigmoid(x); });
  }
  NodeId log(NodeId a) {
    return unary(Op::log, a, [](T x) { return std::log(x); });
  }
  NodeId exp(NodeId a) {
    return unary(Op::exp, a, [](T x) { return std::exp(x); });
  }
  NodeId pow(NodeId a, T exponent) {
    return unary(Op::pow, a, [exponent](T x) { return exponent == T(0) ? T(1) : std::pow(x, exponent); },
                 exponent);
  }

  /// Mean over every element -> 1x1.
  NodeId mean(NodeId a) {
    const auto& A = value(a);
    if (A.size() == 0) shape_error(Op::mean, A.shape(), A.shape());
    T acc = 0;
    for (T v : A.data()) acc += v;
    return push_op(Op::mean, Tensor<T>::scalar(acc / T(A.size())), {a});
  }

  NodeId sum(NodeId a) {
    T acc = 0;
    for (T v : value(a).data()) acc += v;
    return push_op(Op::sum, Tensor<T>::scalar(acc), {a});
  }

  /// Column-wise mean over rows: k x d -> 1 x d.
  NodeId mean_rows(NodeId a) {
    const auto& A = value(a);
    if (A.rows() == 0) shape_error(Op::mean_rows, A.shape(), A.shape());
    Tensor<T> out(Shape{1, A.cols()});
    for (std::size_t r = 0; r < A.rows(); ++r)
      for (std::size_t c = 0; c < A.cols(); ++c) out[c] += A.at(r, c);
    const T inv = T(1) / T(A.rows());
    for (auto& v : out.data()) v *= inv;
    return push_op(Op::mean_rows, std::move(out), {a});
  }

  /// Row-wise softmax.
  NodeId softmax(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t r = 0; r < A.rows(); ++r) {
      auto x = A.row_span(r);
      const T mx = *std::max_element(x.begin(), x.end());
      T z = 0;
      for (std::size_t c = 0; c < x.size(); ++c) z += (out.at(r, c) = std::exp(x[c] - mx));
      for (std::size_t c = 0; c < x.size(); ++c) out.at(r, c) /= z;
    }
    return push_op(Op::softmax, std::move(out), {a});
  }

  /// Row-wise log-softmax.
  NodeId log_softmax(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t r = 0; r < A.rows(); ++r) {
      auto x = A.row_span(r);
      const T mx = *std::max_element(x.begin(), x.end());
      T z = 0;
      for (T v : x) z += std::exp(v - mx);
      const T lse = mx + std::log(z);
      for (std::size_t c = 0; c < x.size(); ++c) out.at(r, c) = x[c] - lse;
    }
    return push_op(Op::log_softmax, std::move(out), {a});
  }

  /// Row-wise x / ||x||. Zero rows are rejected (cosine similarity undefined).
  NodeId l2_normalize(NodeId a) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    std::vector<T> norms(A.rows());
    for (std::size_t r = 0; r < A.rows(); ++r) {
      T ss = 0;
      for (T v : A.row_span(r)) ss += v * v;
      const T nrm = std::sqrt(ss);
      if (nrm == T(0)) {
        throw ContractError("l2_normalize: row " + std::to_string(r) + " has zero norm");
      }
      norms[r] = nrm;
      for (std::size_t c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c) / nrm;
    }
    NodeId id = push_op(Op::l2_normalize, std::move(out), {a});
    nodes_[id].aux = std::move(norms);
    return id;
  }

  /// Inverted dropout: each entry survives with probability 1-p and is scaled
  /// by 1/(1-p). The mask is a pure function of (seed, entry index).
  NodeId dropout(NodeId a, double p, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) {
      throw DomainError("dropout: p must lie in [0,1), got " + std::to_string(p));
    }
    const auto& A = value(a);
    std::vector<T> mult(A.size(), T(1));
    if (p > 0.0) {
      const T keep = T(1) / T(1.0 - p);
      for (std::size_t i = 0; i < A.size(); ++i) {
        mult[i] = to_unit(mix_seed(seed, {i})) < p ? T(0) : keep;
      }
    }
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * mult[i];
    NodeId id = push_op(Op::dropout, std::move(out), {a}, T(p));
    nodes_[id].aux = std::move(mult);
    return id;
  }

  /// Rows of `table` selected by `ids` -> ids.size() x d.
  NodeId embedding_lookup(NodeId table, std::vector<std::size_t> ids) {
    const auto& W = value(table);
    if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
    Tensor<T> out(Shape{ids.size(), W.cols()});
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] >= W.rows()) {
        throw ContractError("embedding_lookup: id " + std::to_string(ids[r]) +
                            " outside table " + W.shape().str());
      }
      auto src = W.row_span(ids[r]);
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * W.cols()));
    }
    NodeId id = push_op(Op::embedding_lookup, std::move(out), {table});
    nodes_[id].index = std::move(ids);
    return id;
  }

  /// Stack inputs (equal column counts) vertically.
  NodeId concat_rows(std::span<const NodeId> inputs) {
    if (inputs.empty()) throw ContractError("concat_rows: no inputs");
    const Shape first = shape(inputs.front());
    std::size_t rows = 0;
    for (NodeId i : inputs) {
      if (shape(i).cols != first.cols) shape_error(Op::concat_rows, first, shape(i));
      rows += shape(i).rows;
    }
    Tensor<T> out(Shape{rows, first.cols});
    auto dst = out.data().begin();
    for (NodeId i : inputs) dst = std::copy(value(i).data().begin(), value(i).data().end(), dst);
    return push_op(Op::concat_rows, std::move(out), std::vector<NodeId>(inputs.begin(), inputs.end()));
  }

  /// Selected flat positions of `a` as a column vector.
  NodeId gather(NodeId a, std::vector<std::size_t> positions) {
    const auto& A = value(a);
    Tensor<T> out(Shape{positions.size(), 1});
    for (std::size_t k = 0; k < positions.size(); ++k) {
      if (positions[k] >= A.size()) {
        throw ContractError("gather: position " + std::to_string(positions[k]) + " outside " +
                            A.shape().str());
      }
      out[k] = A[positions[k]];
    }
    NodeId id = push_op(Op::gather, std::move(out), {a});
    nodes_[id].index = std::move(positions);
    return id;
  }

  // ---- reverse pass ----

  /// Gradients of scalar `root` with respect to every parameter leaf.
  GradMap<T> backward(NodeId root) {
    if (!shape(root).is_scalar()) {
      throw ContractError("backward: root " + std::to_string(root) + " is not scalar " +
                          shape(root).str());
    }
    const T one = T(1);
    run_backward(root, std::span<const T>(&one, 1));
    GradMap<T> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].is_parameter) out.emplace(id, extract(id));
    }
    return out;
  }

  /// Entry i is the gradient of losses[i] alone, restricted to `leaves`.
  /// Each entry costs one reverse sweep touching only that example's path.
  std::vector<GradMap<T>> per_sample_grads(NodeId losses, std::span<const NodeId> leaves) {
    const Shape s = shape(losses);
    if (!s.is_vector()) {
      throw ContractError("per_sample_grads: losses must be rank-1, got " + s.str());
    }
    for (NodeId l : leaves) {
      if (!nodes_.at(l).is_parameter) throw ContractError("per_sample_grads: node is not a parameter leaf");
    }
    std::vector<T> seed(s.size(), T(0));
    std::vector<GradMap<T>> out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      seed[i] = T(1);
      run_backward(losses, seed);
      seed[i] = T(0);
      GradMap<T> m;
      for (NodeId l : leaves) m.emplace(l, extract(l));
      out.push_back(std::move(m));
    }
    return out;
  }

  /// Gradients from the most recent reverse sweep.
  [[nodiscard]] Grad<T> grad(NodeId id) const { return extract(id); }

 private:
  static T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }

  [[noreturn]] static void shape_error(Op op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + a.str() + " vs " + b.str());
  }

  static void gemm_nn(const Tensor<T>& A, const Tensor<T>& B, Tensor<T>& C) {
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    T* c = C.data().data();
    const T* a = A.data().data();
    const T* b = B.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = a[i * k + p];
        if (aip == T(0)) continue;
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }

  NodeId push(TensorNode<T> n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push_op(Op op, Tensor<T> value, std::vector<NodeId> parents, T attr = T(0)) {
    TensorNode<T> n;
    n.op = op;
    n.shape = value.shape();
    n.value = std::move(value);
    n.attr = attr;
    for (NodeId p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    n.parents = std::move(parents);
    return push(std::move(n));
  }

  template <class F>
  NodeId unary(Op op, NodeId a, F f, T attr = T(0)) {
    const auto& A = value(a);
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i]);
    return push_op(op, std::move(out), {a}, attr);
  }

  template <class F>
  NodeId binary(Op op, NodeId a, NodeId b, F f) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa != sb) shape_error(op, sa, sb);
    const auto& A = value(a);
    const auto& B = value(b);
    Tensor<T> out(sa);
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i], B[i]);
    return push_op(op, std::move(out), {a, b});
  }

  // -- gradient buffers --

  void reset_grads() {
    for (NodeId id : touched_) {
      auto& n = nodes_[id];
      n.has_grad = false;
      for (std::size_t r : n.grad_rows) n.row_slot[r] = kNoSlot;
      n.grad_rows.clear();
      n.grad_row_values.clear();
    }
    touched_.clear();
  }

  void touch(NodeId id) {
    auto& n = nodes_[id];
    if (n.has_grad) return;
    n.has_grad = true;
    touched_.push_back(id);
    if (!n.sparse_grad) n.grad.assign(n.shape.size(), T(0));
  }

  /// Dense accumulator for `id` (a sparse table gets densified).
  std::span<T> dense_grad(NodeId id) {
    touch(id);
    auto& n = nodes_[id];
    if (n.sparse_grad) {
      n.grad.assign(n.shape.size(), T(0));
      const std::size_t c = n.shape.cols;
      for (std::size_t k = 0; k < n.grad_rows.size(); ++k) {
        std::copy_n(n.grad_row_values.begin() + static_cast<std::ptrdiff_t>(k * c), c,
                    n.grad.begin() + static_cast<std::ptrdiff_t>(n.grad_rows[k] * c));
        n.row_slot[n.grad_rows[k]] = kNoSlot;
      }
      n.grad_rows.clear();
      n.grad_row_values.clear();
      n.sparse_grad = false;
    }
    return n.grad;
  }

  void accumulate_row(NodeId id, std::size_t row, std::span<const T> g) {
    touch(id);
    auto& n = nodes_[id];
    const std::size_t c = n.shape.cols;
    if (!n.sparse_grad) {
      T* dst = n.grad.data() + row * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
      return;
    }
    if (n.row_slot.empty()) n.row_slot.assign(n.shape.rows, kNoSlot);
    std::uint32_t slot = n.row_slot[row];
    if (slot == kNoSlot) {
      slot = static_cast<std::uint32_t>(n.grad_rows.size());
      n.row_slot[row] = slot;
      n.grad_rows.push_back(row);
      n.grad_row_values.resize(n.grad_row_values.size() + c, T(0));
    }
    T* dst = n.grad_row_values.data() + std::size_t(slot) * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
  }

  [[nodiscard]] Grad<T> extract(NodeId id) const {
    const auto& n = nodes_.at(id);
    if (!n.has_grad) return Grad<T>(n.shape, n.sparse_grad);
    if (!n.sparse_grad) return Grad<T>::from_dense(Tensor<T>(n.shape, n.grad));
    const std::size_t c = n.shape.cols;
    std::vector<std::size_t> order(n.grad_rows.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return n.grad_rows[x] < n.grad_rows[y]; });
    std::vector<std::size_t> rows;
    std::vector<T> vals;
    rows.reserve(order.size());
    vals.reserve(order.size() * c);
    for (std::size_t k : order) {
      rows.push_back(n.grad_rows[k]);
      vals.insert(vals.end(), n.grad_row_values.begin() + static_cast<std::ptrdiff_t>(k * c),
                  n.grad_row_values.begin() + static_cast<std::ptrdiff_t>((k + 1) * c));
    }
    return Grad<T>::from_rows(n.shape, std::move(rows), std::move(vals));
  }

  void run_backward(NodeId root, std::span<const T> seed) {
    reset_grads();
    auto g = dense_grad(root);
    std::copy(seed.begin(), seed.end(), g.begin());
    for (NodeId id = root + 1; id-- > 0;) {
      const auto& n = nodes_[id];
      if (!n.has_grad || n.op == Op::leaf || !n.needs_grad) continue;
      propagate(id);
    }
  }

  bool wants(NodeId id) const { return nodes_[id].needs_grad; }

  void propagate(NodeId id) {
    const auto& n = nodes_[id];
    const std::span<const T> g(n.grad);
    const auto& y = n.value;
    switch (n.op) {
      case Op::leaf: break;
      case Op::matmul: {
        const NodeId a = n.parents[0], b = n.parents[1];
        const auto& A = value(a);
        const auto& B = value(b);
        const std::size_t m = A.rows(), k = A.cols(), p = B.cols();
        if (wants(a)) {
          auto ga = dense_grad(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t q = 0; q < k; ++q) {
              T acc = 0;
              for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * B.at(q, j);
              ga[i * k + q] += acc;
            }
        }
        if (wants(b)) {
          auto gb = dense_grad(b);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t q = 0; q < k; ++q) {
              const T aiq = A.at(i, q);
              if (aiq == T(0)) continue;
              T* dst = gb.data() + q * p;
              const T* gi = g.data() + i * p;
              for (std::size_t j = 0; j < p; ++j) dst[j] += aiq * gi[j];
            }
        }
        break;
      }
      case Op::matmul_nt: {
        const NodeId a = n.parents[0], b = n.parents[1];
        const auto& A = value(a);
        const auto& B = value(b);
        const std::size_t m = A.rows(), k = A.cols(), p = B.rows();
        if (wants(a)) {
          auto ga = dense_grad(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const T gij = g[i * p + j];
              for (std::size_t q = 0; q < k; ++q) ga[i * k + q] += gij * B.at(j, q);
            }
        }
        if (wants(b)) {
          auto gb = dense_grad(b);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const T gij = g[i * p + j];
              for (std::size_t q = 0; q < k; ++q) gb[j * k + q] += gij * A.at(i, q);
            }
        }
        break;
      }
      case Op::transpose: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        const std::size_t r = n.shape.rows, c = n.shape.cols;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[j * r + i] += g[i * c + j];
        break;
      }
      case Op::add:
      case Op::sub: {
        const T sign = n.op == Op::add ? T(1) : T(-1);
        if (wants(n.parents[0])) {
          auto ga = dense_grad(n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (wants(n.parents[1])) {
          auto gb = dense_grad(n.parents[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
        }
        break;
      }
      case Op::mul: {
        const NodeId a = n.parents[0], b = n.parents[1];
        if (wants(a)) {
          const auto& B = value(b);
          auto ga = dense_grad(a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (wants(b)) {
          const auto& A = value(a);
          auto gb = dense_grad(b);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
        break;
      }
      case Op::add_scalar: elementwise(n, [](T gi, T, T) { return gi; }); break;
      case Op::scale: {
        const T c = n.attr;
        elementwise(n, [c](T gi, T, T) { return c * gi; });
        break;
      }
      case Op::relu: elementwise(n, [](T gi, T, T yi) { return yi > T(0) ? gi : T(0); }); break;
      case Op::sigmoid: elementwise(n, [](T gi, T, T yi) { return gi * yi * (T(1) - yi); }); break;
      case Op::log: elementwise(n, [](T gi, T xi, T) { return gi / xi; }); break;
      case Op::exp: elementwise(n, [](T gi, T, T yi) { return gi * yi; }); break;
      case Op::pow: {
        const T e = n.attr;
        elementwise(n, [e](T gi, T xi, T) {
          return e == T(0) ? T(0) : gi * e * std::pow(xi, e - T(1));
        });
        break;
      }
      case Op::mean:
      case Op::sum: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        const T s = n.op == Op::mean ? g[0] / T(ga.size()) : g[0];
        for (auto& v : ga) v += s;
        break;
      }
      case Op::mean_rows: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        const std::size_t rows = shape(a).rows, c = shape(a).cols;
        const T inv = T(1) / T(rows);
        auto ga = dense_grad(a);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[j] * inv;
        break;
      }
      case Op::softmax: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        const std::size_t c = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          T s = 0;
          for (std::size_t j = 0; j < c; ++j) s += g[r * c + j] * y[r * c + j];
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += y[r * c + j] * (g[r * c + j] - s);
        }
        break;
      }
      case Op::log_softmax: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        const std::size_t c = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          T s = 0;
          for (std::size_t j = 0; j < c; ++j) s += g[r * c + j];
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * s;
        }
        break;
      }
      case Op::l2_normalize: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        const std::size_t c = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          T s = 0;
          for (std::size_t j = 0; j < c; ++j) s += y[r * c + j] * g[r * c + j];
          const T inv = T(1) / n.aux[r];
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += (g[r * c + j] - y[r * c + j] * s) * inv;
        }
        break;
      }
      case Op::dropout: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.aux[i];
        break;
      }
      case Op::embedding_lookup: {
        const NodeId table = n.parents[0];
        if (!wants(table)) break;
        const std::size_t c = n.shape.cols;
        for (std::size_t r = 0; r < n.index.size(); ++r) {
          accumulate_row(table, n.index[r], g.subspan(r * c, c));
        }
        break;
      }
      case Op::concat_rows: {
        std::size_t offset = 0;
        for (NodeId p : n.parents) {
          const std::size_t len = nodes_[p].shape.size();
          auto slice = g.subspan(offset, len);
          offset += len;
          if (!wants(p)) continue;
          if (std::all_of(slice.begin(), slice.end(), [](T v) { return v == T(0); })) continue;
          auto gp = dense_grad(p);
          for (std::size_t i = 0; i < len; ++i) gp[i] += slice[i];
        }
        break;
      }
      case Op::gather: {
        const NodeId a = n.parents[0];
        if (!wants(a)) break;
        auto ga = dense_grad(a);
        for (std::size_t k = 0; k < n.index.size(); ++k) ga[n.index[k]] += g[k];
        break;
      }
    }
  }

  template <class F>
  void elementwise(const TensorNode<T>& n, F dfdx) {
    const NodeId a = n.parents[0];
    if (!wants(a)) return;
    const auto& x = value(a);
    auto ga = dense_grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dfdx(n.grad[i], x[i], n.value[i]);
  }

  static constexpr std::uint32_t kNoSlot = std::numeric_limits<std::uint32_t>::max();

  std::deque<TensorNode<T>> nodes_;  // stable references across appends
  std::vector<NodeId> touched_;
  std::uint64_t rng_state_;
};

}  // namespace apam::ad
