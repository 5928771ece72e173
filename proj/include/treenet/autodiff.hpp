#pragma once

// Reverse-mode automatic differentiation on Tensors.
//
// A Var is a shared handle to a node holding a value, an optional gradient and
// the Tape it was recorded on. Ops look at their inputs: if any input lives on a
// tape and any input requires a gradient, the result joins that tape and the op
// appends its backward closure. Parameters are tape-less leaves that require
// gradients, so inference without a tape records nothing and never mutates
// shared weights.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "treenet/tensor.hpp"

namespace treenet {

template <typename T>
class Tape;

template <typename T>
struct VarNode {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  Tape<T>* tape = nullptr;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<VarNode<T>> node) : node_(std::move(node)) {}

  /// Value that never receives a gradient; attaches to `tape` when given.
  static Var constant(Tensor<T> value, Tape<T>* tape = nullptr);
  /// Tape-less leaf that accumulates gradients (model weights).
  static Var parameter(Tensor<T> value);

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Tape<T>* tape() const { return node_->tape; }
  const std::shared_ptr<VarNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<VarNode<T>> node_;
};

/// Ordered record of executed ops. Backward replays the record in exact reverse order.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return Var<T>::constant(std::move(value), this); }
  /// Input that requires a gradient, for differentiating w.r.t. data.
  Var<T> variable(Tensor<T> value);

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  /// Propagates d(loss)/d(.) to every reachable node. `params` receive zero-filled
  /// gradients first, so parameters the loss never touched end with zero grads.
  void backward(const Var<T>& loss, std::span<const Var<T>> params = {});

  /// Drops the record so the tape can be reused.
  void reset();

  size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops broadcast size-1 dimensions of either operand.

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int64_t stride,
              int64_t pad);

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x);
template <typename T>
Var<T> depth_to_space2x(const Var<T>& x);
template <typename T>
Var<T> avg_pool2x2(const Var<T>& x);
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
template <typename T>
Var<T> separable_filter_valid(const Var<T>& x, std::vector<T> taps);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01));
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);
template <typename T>
Var<T> softplus(const Var<T>& x);
template <typename T>
Var<T> log2(const Var<T>& x);
/// max(x, lo); gradient flows only where x > lo.
template <typename T>
Var<T> clamp_min(const Var<T>& x, T lo);
template <typename T>
Var<T> pow_scalar(const Var<T>& x, T exponent);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> add_scalar(const Var<T>& x, T s);
template <typename T>
Var<T> mul_scalar(const Var<T>& x, T s);

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);
template <typename T>
Var<T> slice_channels(const Var<T>& x, int64_t start, int64_t count);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// Sum / mean of every element, as a (1,1,1,1) tensor.
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);

/// Shape rule for broadcasting binary ops; throws ShapeError naming `op`.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b);

/// Builds a result Var: validates finiteness, resolves the tape from the inputs
/// and decides whether the result requires a gradient. Custom ops outside this
/// header use it to join the autodiff graph.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs);

}  // namespace treenet
