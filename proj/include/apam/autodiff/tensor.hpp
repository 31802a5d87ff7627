#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "apam/errors.hpp"

namespace apam::ad {

/// Row-major 2-D extent. Vectors are n x 1 columns or 1 x n rows; scalars are 1 x 1.
struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  [[nodiscard]] constexpr std::size_t size() const noexcept { return rows * cols; }
  [[nodiscard]] constexpr bool is_scalar() const noexcept { return rows == 1 && cols == 1; }
  [[nodiscard]] constexpr bool is_vector() const noexcept { return rows == 1 || cols == 1; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  [[nodiscard]] std::string str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for shape " +
                       shape_.str());
    }
  }

  static Tensor row(std::vector<T> values) {
    const Shape s{1, values.size()};
    return Tensor(s, std::move(values));
  }
  static Tensor column(std::vector<T> values) {
    const Shape s{values.size(), 1};
    return Tensor(s, std::move(values));
  }
  static Tensor scalar(T value) { return Tensor(Shape{1, 1}, value); }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rows() const noexcept { return shape_.rows; }
  [[nodiscard]] std::size_t cols() const noexcept { return shape_.cols; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  [[nodiscard]] std::span<T> data() noexcept { return data_; }
  [[nodiscard]] std::span<const T> data() const noexcept { return data_; }
  [[nodiscard]] std::vector<T>& storage() noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_.cols + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_.cols + c]; }

  [[nodiscard]] std::span<const T> row_span(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * shape_.cols, shape_.cols);
  }

  [[nodiscard]] T item() const {
    if (!shape_.is_scalar()) throw ShapeError("Tensor::item on non-scalar " + shape_.str());
    return data_[0];
  }

  [[nodiscard]] bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Gradient of one tensor; dense, or row-sparse for embedding tables where a
/// single example touches only a handful of rows.
template <class T>
class Grad {
 public:
  Grad() = default;
  explicit Grad(Shape shape, bool sparse = false)
      : shape_(shape), sparse_(sparse), dense_(sparse ? 0 : shape.size(), T(0)) {}

  static Grad from_dense(Tensor<T> t) {
    Grad g;
    g.shape_ = t.shape();
    g.dense_ = std::move(t.storage());
    return g;
  }
  /// `rows` must be strictly increasing; `values` holds rows.size() * cols entries.
  static Grad from_rows(Shape shape, std::vector<std::size_t> rows, std::vector<T> values) {
    Grad g;
    g.shape_ = shape;
    g.sparse_ = true;
    g.rows_ = std::move(rows);
    g.row_values_ = std::move(values);
    return g;
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] bool sparse() const noexcept { return sparse_; }
  [[nodiscard]] std::span<const T> dense() const noexcept { return dense_; }
  [[nodiscard]] std::span<T> dense() noexcept { return dense_; }
  [[nodiscard]] const std::vector<std::size_t>& rows() const noexcept { return rows_; }
  [[nodiscard]] std::span<const T> row_values() const noexcept { return row_values_; }
  [[nodiscard]] std::span<const T> row(std::size_t k) const noexcept {
    return std::span<const T>(row_values_).subspan(k * shape_.cols, shape_.cols);
  }

  /// Stored values (dense entries or the stacked sparse rows).
  [[nodiscard]] std::span<const T> values() const noexcept {
    return sparse_ ? std::span<const T>(row_values_) : std::span<const T>(dense_);
  }

  [[nodiscard]] Tensor<T> to_dense() const {
    if (!sparse_) return Tensor<T>(shape_, dense_);
    Tensor<T> out(shape_);
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      std::copy_n(row_values_.begin() + static_cast<std::ptrdiff_t>(k * shape_.cols), shape_.cols,
                  out.data().begin() + static_cast<std::ptrdiff_t>(rows_[k] * shape_.cols));
    }
    return out;
  }

  [[nodiscard]] bool all_finite() const noexcept {
    auto v = values();
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  }

  /// this += scale * other. Sparse + sparse stays sparse (merged rows).
  void add_scaled(const Grad& other, T scale) {
    if (other.shape_ != shape_) {
      throw ShapeError("Grad::add_scaled: " + shape_.str() + " vs " + other.shape_.str());
    }
    if (!other.sparse_) {
      densify();
      for (std::size_t i = 0; i < dense_.size(); ++i) dense_[i] += scale * other.dense_[i];
      return;
    }
    if (!sparse_) {
      const std::size_t c = shape_.cols;
      for (std::size_t k = 0; k < other.rows_.size(); ++k) {
        T* dst = dense_.data() + other.rows_[k] * c;
        const T* src = other.row_values_.data() + k * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += scale * src[j];
      }
      return;
    }
    merge_sparse(other, scale);
  }

  void scale(T s) {
    for (auto& v : dense_) v *= s;
    for (auto& v : row_values_) v *= s;
  }

 private:
  void densify() {
    if (!sparse_) return;
    Tensor<T> d = to_dense();
    dense_ = std::move(d.storage());
    rows_.clear();
    row_values_.clear();
    sparse_ = false;
  }

  void merge_sparse(const Grad& other, T scale) {
    const std::size_t c = shape_.cols;
    std::vector<std::size_t> rows;
    std::vector<T> vals;
    rows.reserve(rows_.size() + other.rows_.size());
    vals.reserve((rows_.size() + other.rows_.size()) * c);
    std::size_t a = 0;
    std::size_t b = 0;
    while (a < rows_.size() || b < other.rows_.size()) {
      const bool take_a = b == other.rows_.size() || (a < rows_.size() && rows_[a] < other.rows_[b]);
      const bool take_b = a == rows_.size() || (b < other.rows_.size() && other.rows_[b] < rows_[a]);
      if (take_a) {
        rows.push_back(rows_[a]);
        vals.insert(vals.end(), row_values_.begin() + static_cast<std::ptrdiff_t>(a * c),
                    row_values_.begin() + static_cast<std::ptrdiff_t>((a + 1) * c));
        ++a;
      } else if (take_b) {
        rows.push_back(other.rows_[b]);
        for (std::size_t j = 0; j < c; ++j) vals.push_back(scale * other.row_values_[b * c + j]);
        ++b;
      } else {
        rows.push_back(rows_[a]);
        for (std::size_t j = 0; j < c; ++j) {
          vals.push_back(row_values_[a * c + j] + scale * other.row_values_[b * c + j]);
        }
        ++a;
        ++b;
      }
    }
    rows_ = std::move(rows);
    row_values_ = std::move(vals);
  }

  Shape shape_;
  bool sparse_ = false;
  std::vector<T> dense_;
  std::vector<std::size_t> rows_;
  std::vector<T> row_values_;
};

/// Sum of elementwise products, accumulated in double.
template <class T>
[[nodiscard]] double dot(const Grad<T>& a, const Grad<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("dot: " + a.shape().str() + " vs " + b.shape().str());
  }
  const std::size_t c = a.shape().cols;
  double acc = 0.0;
  if (!a.sparse() && !b.sparse()) {
    auto x = a.dense();
    auto y = b.dense();
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x[i]) * double(y[i]);
    return acc;
  }
  if (a.sparse() && b.sparse()) {
    const auto& ra = a.rows();
    const auto& rb = b.rows();
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < ra.size() && j < rb.size()) {
      if (ra[i] < rb[j]) {
        ++i;
      } else if (rb[j] < ra[i]) {
        ++j;
      } else {
        auto x = a.row(i);
        auto y = b.row(j);
        for (std::size_t k = 0; k < c; ++k) acc += double(x[k]) * double(y[k]);
        ++i;
        ++j;
      }
    }
    return acc;
  }
  const Grad<T>& s = a.sparse() ? a : b;
  const Grad<T>& d = a.sparse() ? b : a;
  auto dv = d.dense();
  for (std::size_t k = 0; k < s.rows().size(); ++k) {
    auto x = s.row(k);
    const std::size_t base = s.rows()[k] * c;
    for (std::size_t j = 0; j < c; ++j) acc += double(x[j]) * double(dv[base + j]);
  }
  return acc;
}

/// t += scale * g
template <class T>
void axpy(Tensor<T>& t, const Grad<T>& g, T scale) {
  if (t.shape() != g.shape()) {
    throw ShapeError("axpy: " + t.shape().str() + " vs " + g.shape().str());
  }
  auto out = t.data();
  if (!g.sparse()) {
    auto v = g.dense();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] += scale * v[i];
    return;
  }
  const std::size_t c = g.shape().cols;
  for (std::size_t k = 0; k < g.rows().size(); ++k) {
    auto x = g.row(k);
    T* dst = out.data() + g.rows()[k] * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += scale * x[j];
  }
}

}  // namespace apam::ad
