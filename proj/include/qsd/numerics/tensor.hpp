// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace qsd::num {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
  }
};

}  // namespace detail

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled() noexcept;
  static void set_enabled(bool on) noexcept;
};

/// Disables graph recording for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor with an optional reverse-mode graph node.
///
/// Copies are shallow: two `BasicTensor` handles may refer to the same node.
/// Use `clone()` for an independent leaf and `detach()` to cut the graph.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access; only meaningful for leaves (parameter updates).
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool has_grad() const noexcept { return node_ && node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad();
  void zero_grad();

  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }
  BasicTensor reshape(Shape shape) const;

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<detail::Node<T>>& node() const noexcept { return node_; }

  /// Builds an op result. The graph edge is recorded only when grad mode is
  /// on and at least one input requires a gradient; otherwise the result is
  /// a detached leaf and `backward` is discarded.
  static BasicTensor make_op(Shape shape, std::vector<T> value, const char* op,
                             const std::vector<BasicTensor>& inputs,
                             std::function<void(detail::Node<T>&)> backward);

 private:
  explicit BasicTensor(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Reverse-mode pass from a one-element loss. Gradients of every node
/// reachable from `loss` are overwritten with d(loss)/d(node).
template <class T>
void backward(const BasicTensor<T>& loss);

/// Same as above, but first zeroes the gradient of every tensor in
/// `params`, so parameters the loss does not reach end with zero gradient.
template <class T>
void backward(const BasicTensor<T>& loss, std::span<BasicTensor<T>> params);

template <class To, class From>
BasicTensor<To> cast(const BasicTensor<From>& x) {
  std::vector<To> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(x[i]);
  return BasicTensor<To>(x.shape(), std::move(v));
}

}  // namespace qsd::num
