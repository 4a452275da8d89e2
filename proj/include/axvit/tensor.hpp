#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "axvit/common.hpp"

namespace axvit {

/// Dense row-major tensor. The element type is the mode tag: `RealTensor`
/// carries real values, `IntTensor` carries signed integers.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T{})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_))
      throw RangeError("Tensor: payload length " + std::to_string(data_.size()) +
                       " does not match shape (" + std::to_string(element_count(shape_)) + ")");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{}) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const {
    require_rank2();
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2();
    return shape_[1];
  }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * shape_[1], shape_[1]); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * shape_[1], shape_[1]);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }

 private:
  void require_rank2() const {
    if (shape_.size() != 2) throw RangeError("Tensor: expected a matrix, got rank " + std::to_string(shape_.size()));
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using RealTensor = Tensor<double>;
using IntTensor = Tensor<std::int32_t>;

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace ops {

/// Exact real matmul C = A·B.
inline RealTensor matmul(const RealTensor& a, const RealTensor& b) {
  if (a.cols() != b.rows())
    throw RangeError("matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  RealTensor c = RealTensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &c(i, 0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a(i, t);
      const double* brow = &b(t, 0);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// C = A·Bᵀ.
inline RealTensor matmul_nt(const RealTensor& a, const RealTensor& b) {
  if (a.cols() != b.cols())
    throw RangeError("matmul_nt: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  RealTensor c = RealTensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a(i, t) * b(j, t);
      c(i, j) = s;
    }
  return c;
}

/// C = Aᵀ·B.
inline RealTensor matmul_tn(const RealTensor& a, const RealTensor& b) {
  if (a.rows() != b.rows())
    throw RangeError("matmul_tn: shape mismatch " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  RealTensor c = RealTensor::matrix(m, n);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(t, i);
      double* crow = &c(i, 0);
      const double* brow = &b(t, 0);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> t = Tensor<T>::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Adds `bias` (length = cols) to every row.
inline void add_row_bias(RealTensor& x, const RealTensor& bias) {
  if (bias.size() != x.cols()) throw RangeError("add_row_bias: bias length mismatch");
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += bias[j];
}

inline void add_inplace(RealTensor& a, const RealTensor& b) {
  if (a.shape() != b.shape()) throw RangeError("add: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void scale_inplace(RealTensor& a, double s) {
  for (auto& v : a.values()) v *= s;
}

/// Columns [c0, c0 + width) of a matrix.
inline RealTensor slice_cols(const RealTensor& a, std::size_t c0, std::size_t width) {
  if (c0 + width > a.cols()) throw RangeError("slice_cols: out of range");
  RealTensor s = RealTensor::matrix(a.rows(), width);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) s(i, j) = a(i, c0 + j);
  return s;
}

inline void put_cols(RealTensor& dst, const RealTensor& src, std::size_t c0) {
  if (src.rows() != dst.rows() || c0 + src.cols() > dst.cols()) throw RangeError("put_cols: out of range");
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, c0 + j) = src(i, j);
}

inline void softmax_rows(RealTensor& x) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (auto& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : r) v /= sum;
  }
}

inline bool all_finite(const RealTensor& x) {
  return std::all_of(x.values().begin(), x.values().end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace ops
}  // namespace axvit
