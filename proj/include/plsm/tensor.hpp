#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace plsm {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not conform; the message names the op and
/// both shapes.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation would store NaN or Inf.
class NonFiniteError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

/// Dense row-major array of doubles. Every dimension is positive and
/// `size() == product(shape())`.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor row(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows and columns of a rank-2 view: leading axes are folded into rows.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Scalar value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  bool all_finite() const;
  /// Throws NonFiniteError naming `context` if any entry is NaN/Inf.
  void require_finite(const std::string& context) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Squared Frobenius norm.
double squared_norm(const Tensor& t);
double frobenius_norm(const Tensor& t);

/// Copy rows `indices` of a rank-2 tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);

/// C = A * B for rank-2 tensors, optionally transposing either operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

}  // namespace plsm
