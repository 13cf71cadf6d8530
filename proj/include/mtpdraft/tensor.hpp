// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtpdraft/error.hpp"

namespace mtpdraft {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles. The optional gradient buffer always has
// the same number of elements as the data.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Last dimension; rows() folds every leading dimension.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  bool has_grad() const { return grad_.has_value(); }
  std::span<double> grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }
  std::span<const double> grad() const {
    if (!grad_) throw StateError("tensor has no gradient");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  void clear_grad() { grad_.reset(); }

  // Bitwise comparison of shape and data; gradients are ignored.
  bool identical(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(data_[i]) != std::bit_cast<std::uint64_t>(other.data_[i])) {
        return false;
      }
    }
    return true;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

namespace kernels {

// Fixed summation order: four interleaved partial sums, then the tail. Every
// caller gets the same rounding for the same inputs regardless of how many
// rows are processed together, which keeps batched and incremental decoding
// bit-identical.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[n x out] = x[n x in] * W^T with W stored [out x in].
inline void linear(const double* x, std::size_t n, std::size_t in, const double* w, std::size_t out,
                   double* y) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * in;
    double* yi = y + i * out;
    for (std::size_t j = 0; j < out; ++j) yi[j] = dot(xi, w + j * in, in);
  }
}

// Same as linear() but only over the listed rows of W.
inline void linear_rows(const double* x, std::size_t n, std::size_t in, const double* w,
                        std::span<const TokenId> rows, double* y) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * in;
    double* yi = y + i * rows.size();
    for (std::size_t j = 0; j < rows.size(); ++j) {
      yi[j] = dot(xi, w + static_cast<std::size_t>(rows[j]) * in, in);
    }
  }
}

}  // namespace kernels

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace mtpdraft
