#include "scorer/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

namespace scorer {

namespace {

size_t element_count(const std::vector<size_t>& dims) {
  if (dims.empty() || dims.size() > 2) {
    throw ShapeError("tensor rank must be 1 or 2, got " +
                     std::to_string(dims.size()));
  }
  size_t n = 1;
  for (size_t d : dims) {
    if (d == 0) throw ShapeError("tensor extents must be positive");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<size_t> dims, double fill)
    : dims_(std::move(dims)), data_(element_count(dims_), fill) {}

Tensor::Tensor(std::vector<size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (element_count(dims_) != data_.size()) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match dims " + shape_string(dims_));
  }
}

Tensor Tensor::matrix(size_t rows, size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_string(dims_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(std::vector<size_t> dims) const {
  return Tensor(std::move(dims), data_);
}

std::string shape_string(const std::vector<size_t>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dims disagree: " + shape_string(a.dims()) +
                     " x " + shape_string(b.dims()));
  }
  Tensor out({a.rows(), b.cols()});
  for (size_t i = 0; i < a.rows(); ++i) {
    for (size_t k = 0; k < a.cols(); ++k) {
      const double av = a.at(i, k);
      for (size_t j = 0; j < b.cols(); ++j) out.at(i, j) += av * b.at(k, j);
    }
  }
  return out;
}

}  // namespace scorer
