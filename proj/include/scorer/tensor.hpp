#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scorer {

/// Thrown on shape or argument contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a forward value becomes NaN/Inf or a backward pass is misused.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles. Rank 1 ([n]) or rank 2 ([rows, cols]).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> dims, double fill = 0.0);
  Tensor(std::vector<size_t> dims, std::vector<double> data);

  static Tensor matrix(size_t rows, size_t cols,
                       std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor zeros_like(const Tensor& other) {
    return Tensor(other.dims_);
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<size_t>& dims() const { return dims_; }
  size_t rank() const { return dims_.size(); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rank-1 tensors behave as a single row.
  size_t rows() const { return dims_.size() == 2 ? dims_[0] : 1; }
  size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  double& at(size_t r, size_t c) { return data_[r * cols() + c]; }
  double at(size_t r, size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double item() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  /// Reinterpret with new dims of equal element count.
  Tensor reshaped(std::vector<size_t> dims) const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<size_t> dims_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<size_t>& dims);

inline double dot(std::span<const double> a, std::span<const double> b) {
  // Four fixed partial sums; the order depends only on the index, so
  // dot(a, b) == dot(b, a) bit-exactly.
  const size_t n = a.size();
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

/// Naive value-level product, used where no tape is involved.
Tensor matmul_values(const Tensor& a, const Tensor& b);

}  // namespace scorer
