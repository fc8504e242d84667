#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/random.hpp"

namespace mkgc {

namespace detail {

inline void ensure_finite(std::span<const double> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      fail(ErrorKind::kNumeric,
           std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// Dense float64 vector.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {
    detail::ensure_finite(data_, "Vector");
  }
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {
    detail::ensure_finite(data_, "Vector");
  }

  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

/// Dense row-major float64 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorKind::kInvalidArgument,
            "Matrix: data length " + std::to_string(data_.size()) + " != " +
                std::to_string(rows_) + "x" + std::to_string(cols_));
    detail::ensure_finite(data_, "Matrix");
  }
  Matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
      : Matrix(rows, cols, std::vector<double>(values)) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix column(const Vector& v) { return Matrix(v.dim(), 1, v.raw()); }

  static Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (double& x : m.data_) x = stddev * rng.normal();
    return m;
  }

  /// Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
  static Matrix orthogonal(std::size_t n, Rng& rng) {
    Matrix g = gaussian(n, n, 1.0, rng);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < i; ++k) {
        double proj = 0.0;
        for (std::size_t j = 0; j < n; ++j) proj += g(i, j) * g(k, j);
        for (std::size_t j = 0; j < n; ++j) g(i, j) -= proj * g(k, j);
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < n; ++j) norm += g(i, j) * g(i, j);
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < n; ++j) g(i, j) /= norm;
    }
    return g;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Vector as_vector() const { return Vector(data_); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kInvalidArgument,
         std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
             std::to_string(b.cols()));
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::kInvalidArgument,
          "matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
              std::to_string(b.rows()) + " differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  detail::ensure_finite(out.values(), "matmul");
  return out;
}

inline Vector matvec(const Matrix& a, const Vector& v) {
  require(a.cols() == v.dim(), ErrorKind::kInvalidArgument,
          "matvec: matrix has " + std::to_string(a.cols()) + " columns, vector has dim " +
              std::to_string(v.dim()));
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    const auto r = a.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) acc += r[k] * v[k];
    out[i] = acc;
  }
  detail::ensure_finite(out.values(), "matvec");
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  detail::ensure_finite(o, "add");
  return out;
}

inline Vector add(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), ErrorKind::kInvalidArgument,
          "add: dims " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()));
  Vector out = a;
  for (std::size_t i = 0; i < out.dim(); ++i) out[i] += b[i];
  detail::ensure_finite(out.values(), "add");
  return out;
}

inline Vector sub(const Vector& a, const Vector& b) {
  require(a.dim() == b.dim(), ErrorKind::kInvalidArgument,
          "sub: dims " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()));
  Vector out = a;
  for (std::size_t i = 0; i < out.dim(); ++i) out[i] -= b[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& x : out.values()) x *= s;
  detail::ensure_finite(out.values(), "scale");
  return out;
}

inline Vector scale(const Vector& a, double s) {
  Vector out = a;
  for (double& x : out.values()) x *= s;
  detail::ensure_finite(out.values(), "scale");
  return out;
}

inline Vector concat(std::span<const Vector> parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return Vector(std::move(out));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::kInvalidArgument, "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double dot(const Vector& a, const Vector& b) { return dot(a.values(), b.values()); }

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Max-subtracted softmax.
inline Vector softmax(const Vector& v) {
  require(!v.empty(), ErrorKind::kInvalidArgument, "softmax: empty vector");
  const double peak = *std::max_element(v.begin(), v.end());
  Vector out(v.dim());
  double total = 0.0;
  for (std::size_t i = 0; i < v.dim(); ++i) {
    out[i] = std::exp(v[i] - peak);
    total += out[i];
  }
  for (double& x : out.values()) x /= total;
  detail::ensure_finite(out.values(), "softmax");
  return out;
}

/// Index of the maximum; ties resolve to the lowest index.
inline std::size_t argmax_det(std::span<const double> v) {
  require(!v.empty(), ErrorKind::kInvalidArgument, "argmax_det: empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline std::size_t argmax_det(const Vector& v) { return argmax_det(v.values()); }

/// Order-sensitive FNV digest of the raw bytes; equal iff bit-identical.
inline std::uint64_t digest(const Matrix& m, std::uint64_t h = kFnvOffset) {
  const std::size_t shape[2] = {m.rows(), m.cols()};
  h = fnv1a_bytes(shape, sizeof(shape), h);
  return fnv1a_bytes(m.values().data(), m.size() * sizeof(double), h);
}

}  // namespace mkgc
