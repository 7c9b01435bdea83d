// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "qsd/numerics/tensor.hpp"

#include <sstream>
#include <unordered_map>
#include <utility>

#include "qsd/error.hpp"

namespace qsd::num {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool GradMode::enabled() noexcept { return g_grad_enabled; }
void GradMode::set_enabled(bool on) noexcept { g_grad_enabled = on; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {
void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor: empty shape (use {1} for scalars)");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor: zero dimension in shape " + shape_str(shape));
}
}  // namespace

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : node_(std::make_shared<detail::Node<T>>()) {
  validate_shape(shape);
  node_->value.assign(num::numel(shape), fill);
  node_->shape = std::move(shape);
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : node_(std::make_shared<detail::Node<T>>()) {
  validate_shape(shape);
  if (num::numel(shape) != data.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  node_->value = std::move(data);
  node_->shape = std::move(shape);
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->value[0];
}

template <class T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw Error("set_requires_grad: only leaves can change requires_grad");
  node_->requires_grad = on;
  return *this;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <class T>
void BasicTensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T{0});
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node_->shape, node_->value);
}

template <class T>
BasicTensor<T> BasicTensor<T>::reshape(Shape shape) const {
  if (num::numel(shape) != numel())
    throw ShapeError("reshape: " + shape_str(this->shape()) + " -> " + shape_str(shape));
  return make_op(std::move(shape), node_->value, "reshape", {*this}, [](detail::Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) p.grad[i] += out.grad[i];
  });
}

template <class T>
BasicTensor<T> BasicTensor<T>::make_op(Shape shape, std::vector<T> value, const char* op,
                                       const std::vector<BasicTensor>& inputs,
                                       std::function<void(detail::Node<T>&)> backward) {
  BasicTensor out(std::move(shape), std::move(value));
  out.node_->op = op;
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward_fn = std::move(backward);
  return out;
}

namespace {

template <class T>
std::vector<detail::Node<T>*> topo_order(detail::Node<T>* root) {
  // 0 = unseen, 1 = on stack, 2 = done.
  std::unordered_map<detail::Node<T>*, int> state;
  std::vector<detail::Node<T>*> order;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  state[root] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* p = node->parents[next++].get();
      if (!p->requires_grad) continue;
      int& s = state[p];
      if (s == 1) throw Error("backward: cycle detected in computation graph");
      if (s == 0) {
        s = 1;
        stack.emplace_back(p, 0);
      }
    } else {
      state[node] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace

template <class T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a one-element tensor, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) return;
  auto order = topo_order(loss.node().get());
  for (auto* n : order) n->grad.assign(n->value.size(), T{0});
  loss.node()->grad[0] = T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->is_leaf()) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n != loss.node().get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <class T>
void backward(const BasicTensor<T>& loss, std::span<BasicTensor<T>> params) {
  for (auto& p : params) p.zero_grad();
  backward(loss);
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void backward<float>(const BasicTensor<float>&);
template void backward<double>(const BasicTensor<double>&);
template void backward<float>(const BasicTensor<float>&, std::span<BasicTensor<float>>);
template void backward<double>(const BasicTensor<double>&, std::span<BasicTensor<double>>);

}  // namespace qsd::num
