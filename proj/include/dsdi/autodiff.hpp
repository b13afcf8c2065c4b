// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense tensors. A Tape records
// operations in execution order; Var is a lightweight handle to one recorded
// node. Operators are free functions taking and returning Vars.
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dsdi/tensor.hpp"

namespace dsdi {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const { return tape_->value(index_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(index_); }
  /// Gradient of the last backward() output with respect to this node; zeros
  /// when no gradient reached it.
  const Tensor<Scalar>& grad() const { return tape_->grad_buffer(index_); }
  /// Value of a single-element tensor.
  Scalar item() const;

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t index_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  /// Called once during backward with the tape and the node's own index.
  /// Implementations read `grad(self)` and accumulate into `grad_buffer(parent)`.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  /// Free leaf that requires a gradient; used by tests and gradient checks.
  Var<Scalar> leaf(Tensor<Scalar> value);
  /// Leaf bound to a Parameter. When `trainable`, backward() adds the gradient
  /// into `param.grad`; otherwise the value enters as a constant.
  Var<Scalar> parameter(Parameter<Scalar>& param, bool trainable = true);

  Var<Scalar> record(Tensor<Scalar> value, std::vector<std::size_t> parents, BackwardFn fn);

  /// Seeds d(out)/d(out) = 1 and propagates to every node preceding `out`.
  /// `out` must hold a single element. A tape supports one backward pass.
  void backward(const Var<Scalar>& out);

  const Tensor<Scalar>& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  const Tensor<Scalar>& grad(std::size_t i) const;
  /// Zero-initialized on first access.
  Tensor<Scalar>& grad_buffer(std::size_t i);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename Scalar>
Scalar Var<Scalar>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(v.shape()));
  return v[0];
}

// ---------------------------------------------------------------------------
// Operators

/// 2-D convolution, zero padding, square kernel. input [B,C,H,W], kernel [O,C,k,k].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, Index stride, Index pad);

/// Adds bias[C] along dimension 1 of a [B,C] or [B,C,H,W] tensor.
template <typename Scalar>
Var<Scalar> add_channel_bias(const Var<Scalar>& input, const Var<Scalar>& bias);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& input);

/// Per-sample, per-group standardization followed by a per-channel affine map.
template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& input, Index groups, const Var<Scalar>& gamma,
                       const Var<Scalar>& beta, Scalar eps = Scalar(1e-5));

/// [B,C,H,W] -> [B,C]
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input);

/// [M,K] x [K,N] -> [M,N]
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// Concatenation of [B,P] and [B,Q] along columns.
template <typename Scalar>
Var<Scalar> concat(const Var<Scalar>& a, const Var<Scalar>& b);

/// Mean over the batch of -sum_k t_k log softmax(logits)_k. Target rows must be
/// probability vectors.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, const Tensor<Scalar>& targets);

/// softmax_cross_entropy with hard integer labels.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);

/// Identity forward; the backward pass scales the upstream gradient by -lambda.
template <typename Scalar>
Var<Scalar> gradient_reversal(const Var<Scalar>& input, Scalar lambda);

/// Unbiased cross-covariance of the columns of a[B,P] and b[B,Q]: [P,Q].
template <typename Scalar>
Var<Scalar> batch_covariance(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> frobenius_norm(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& input, Scalar factor);

template <typename Scalar>
Var<Scalar> multiply(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input);

/// Copies the value into a constant node; no gradient flows back.
template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator*(Scalar factor, const Var<Scalar>& v) {
  return scale(v, factor);
}

// ---------------------------------------------------------------------------
// Plain tensor helpers (no tape)

template <typename Scalar>
Tensor<Scalar> one_hot(std::span<const int> labels, Index classes);

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits);

template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& matrix);

/// Unbiased cross-covariance of two [B,P] / [B,Q] tensors.
template <typename Scalar>
RowMatrix<Scalar> covariance_matrix(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

}  // namespace dsdi
