#pragma once

#include "plsm/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace plsm {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
class Var {
public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records forward operations in topological order and replays them in
/// reverse to accumulate gradients.
///
/// Parameters are registered by address: registering the same tensor twice
/// returns the same node, so gradients from every use are summed.
class Tape {
public:
  /// Called with the gradient of the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(const Tensor& source);

  /// Records an op. `inputs` must already be on this tape. The output is
  /// checked for finiteness.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Reverse sweep from a one-element loss node. May be called once per tape.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient of node `id` after backward(); zero-filled if it received none.
  const Tensor& grad(std::size_t id);
  const Tensor& grad(Var v) { return grad(v.id()); }

  /// Gradient for a registered parameter, or nullptr if `source` was never
  /// registered on this tape.
  const Tensor* gradient_for(const Tensor& source);

  /// Adds `g` into the gradient buffer of node `id` (no-op for nodes that do
  /// not require gradients).
  void accumulate(std::size_t id, const Tensor& g);
  /// Mutable buffer for in-place accumulation, or nullptr when not needed.
  Tensor* grad_buffer(std::size_t id);

  /// Label included in error messages for ops recorded from now on.
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const { return scope_; }

  std::size_t size() const { return nodes_.size(); }
  std::size_t parameter_count() const { return parameter_ids_.size(); }
  bool backward_done() const { return backward_done_; }

  Var var(std::size_t id) { return Var(this, id); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> parameter_ids_;
  std::string scope_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// Differentiable operations. Elementwise binary ops accept equal shapes, or a
// [1, D] row vector broadcast against a [B, D] batch.
namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var relu(Var a);
Var square(Var a);
Var abs(Var a);
/// Elementwise max(a, floor).
Var maximum(Var a, double floor);
/// Concatenate rank-2 tensors with equal row counts along the last axis.
Var concat(std::span<const Var> parts);
Var concat(Var a, Var b);
/// Columns [begin, end) of a rank-2 tensor.
Var slice(Var a, std::size_t begin, std::size_t end);
Var sum(Var a);
Var mean(Var a);
/// Per-row squared L2 norm: [B, D] -> [B, 1].
Var row_sqnorm(Var a);
/// Per-row L1 norm: [B, D] -> [B, 1].
Var row_l1norm(Var a);
Var gather_rows(Var a, std::vector<std::size_t> indices);
/// Identity forward; contributes no gradient to its input.
Var stop_gradient(Var a);
/// Keeps the k largest-magnitude entries of each row and zeroes the rest.
/// Gradients pass only through kept entries.
Var topk_mask(Var a, std::size_t k);

}  // namespace ops

inline Var operator+(Var a, Var b) { return ops::add(a, b); }
inline Var operator-(Var a, Var b) { return ops::sub(a, b); }
inline Var operator*(Var a, Var b) { return ops::mul(a, b); }

}  // namespace plsm
