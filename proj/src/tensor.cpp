#include "plsm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace plsm {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void validate_shape(const Shape& shape) {
  if (shape.empty()) {
    throw ShapeError("tensor shape must have at least one dimension");
  }
  for (std::size_t d : shape) {
    if (d == 0) {
      throw ShapeError("tensor shape " + shape_string(shape) + " has a zero dimension");
    }
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::row(std::initializer_list<double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() requires a one-element tensor, got " + shape_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(const std::string& context) const {
  if (!all_finite()) {
    throw NonFiniteError("non-finite value produced by " + context);
  }
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

double frobenius_norm(const Tensor& t) { return std::sqrt(squared_norm(t)); }

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  const std::size_t cols = t.cols();
  Tensor out({indices.size(), cols});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       shape_string(t.shape()));
    }
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * cols), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected rank-2 operands, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                     (transpose_a ? "^T" : "") + " and " + shape_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor out({m, n});
  ConstMap am(a.data().data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
  ConstMap bm(b.data().data(), static_cast<Eigen::Index>(b.dim(0)), static_cast<Eigen::Index>(b.dim(1)));
  MutMap om(out.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (transpose_a && transpose_b) {
    om.noalias() = am.transpose() * bm.transpose();
  } else if (transpose_a) {
    om.noalias() = am.transpose() * bm;
  } else if (transpose_b) {
    om.noalias() = am * bm.transpose();
  } else {
    om.noalias() = am * bm;
  }
  return out;
}

}  // namespace plsm
