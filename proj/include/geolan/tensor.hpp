// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double tensors of rank <= 3 and the handful of kernels the
// rest of the library is built on.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "geolan/error.hpp"

namespace geolan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_rank();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    detail::require(shape_size(shape_) == data_.size(),
                    "Tensor: shape " + shape_str(shape_) + " does not match " +
                        std::to_string(data_.size()) + " values");
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      detail::require(row.size() == c, "Tensor::matrix: ragged rows");
      v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(v));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double item() const {
    detail::require(data_.size() == 1, "Tensor::item: tensor has " + std::to_string(data_.size()) +
                                           " elements");
    return data_[0];
  }

  /// Row i of a rank-2 tensor.
  std::span<double> row(std::size_t i) {
    return std::span<double>(data_).subspan(i * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * shape_[1], shape_[1]);
  }

  /// Matrix k of a rank-3 tensor, as a copy.
  Tensor slice(std::size_t k) const {
    detail::require(rank() == 3, "Tensor::slice: rank-3 tensor required");
    const std::size_t n = shape_[1] * shape_[2];
    return Tensor(Shape{shape_[1], shape_[2]},
                  std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(k * n),
                                      data_.begin() + static_cast<std::ptrdiff_t>((k + 1) * n)));
  }

  Tensor reshaped(Shape shape) const {
    detail::require(shape_size(shape) == data_.size(), "Tensor::reshaped: size mismatch");
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_rank() const {
    detail::require(shape_.size() <= 3, "Tensor: rank > 3 is not supported");
  }

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Kernels

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Tensor& t) { return norm2(t.data()); }

inline void require_matrix(const Tensor& t, const char* who) {
  detail::require(t.rank() == 2, std::string(who) + ": rank-2 tensor required, got " +
                                     shape_str(t.shape()));
}

/// C = A * B.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  detail::require(b.rows() == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
  Tensor c(Shape{m, n});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* bp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

/// C = A^T * B.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  detail::require(b.rows() == k, "matmul_tn: leading dimensions differ");
  Tensor c(Shape{m, n});
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[p * m + i];
      if (av == 0.0) continue;
      double* ci = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  return c;
}

/// C = A * B^T.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  detail::require(b.cols() == k, "matmul_nt: trailing dimensions differ");
  Tensor c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < n; ++j) c(i, j) = dot(ai, b.row(j));
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor c = a;
  for (auto& v : c.values()) v *= s;
  return c;
}

/// a += s * b, elementwise.
inline void axpy(double s, const Tensor& b, Tensor& a) {
  detail::require(a.shape() == b.shape(), "axpy: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

inline double trace(const Tensor& a) {
  require_matrix(a, "trace");
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) s += a(i, i);
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Column j of a matrix as a vector.
inline std::vector<double> column(const Tensor& a, std::size_t j) {
  std::vector<double> c(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) c[i] = a(i, j);
  return c;
}

/// Mean of the rows of an M x d matrix.
inline std::vector<double> row_mean(const Tensor& a) {
  require_matrix(a, "row_mean");
  std::vector<double> m(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) m[j] += a(i, j);
  for (auto& v : m) v /= static_cast<double>(a.rows());
  return m;
}

/// (1/M) sum_i (x_i - c)(x_i - c)^T, with c the row mean when `center` is set
/// and zero otherwise.
inline Tensor second_moment(const Tensor& points, bool center) {
  require_matrix(points, "second_moment");
  const std::size_t m = points.rows(), d = points.cols();
  std::vector<double> mu = center ? row_mean(points) : std::vector<double>(d, 0.0);
  Tensor cov(Shape{d, d});
  std::vector<double> x(d);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[j] = points(i, j) - mu[j];
    for (std::size_t a = 0; a < d; ++a) {
      if (x[a] == 0.0) continue;
      for (std::size_t b = a; b < d; ++b) cov(a, b) += x[a] * x[b];
    }
  }
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) *= inv;
      cov(b, a) = cov(a, b);
    }
  return cov;
}

}  // namespace geolan
