// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "maskgen/numerics/tensor.hpp"

namespace maskgen {

template <class T>
class Tape;

namespace detail {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  Tape<T>* tape = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  void accumulate(const Tensor<T>& g) {
    if (grad.empty()) {
      grad = g;
      return;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
};

}  // namespace detail

/// Handle to a value that may participate in reverse-mode differentiation.
///
/// A Var without a tape is a plain constant: operations on it compute the
/// forward value only and retain nothing. A Var created by `Tape::leaf`,
/// or derived from one, is recorded on that tape.
template <class T>
class Var {
 public:
  Var() = default;

  /// Wraps a value with no gradient tracking.
  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  Tape<T>* tape() const { return node_ ? node_->tape : nullptr; }
  bool tracked() const { return tape() != nullptr; }
  bool valid() const { return static_cast<bool>(node_); }

  /// Scalar read of a one-element value.
  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape().to_string());
    return value()[0];
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

  explicit Var(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Records differentiable operations in execution order and replays them
/// backwards. The tape owns every recorded node, so saved activations live
/// until the tape is destroyed.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable input.
  Var<T> leaf(Tensor<T> value) {
    auto node = std::make_shared<detail::Node<T>>();
    node->value = std::move(value);
    node->tape = this;
    nodes_.push_back(node);
    return Var<T>(std::move(node));
  }

  void record(const std::shared_ptr<detail::Node<T>>& node) { nodes_.push_back(node); }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(out)/d(out) = 1 for a one-element `out` and propagates.
  /// Returns the number of backward functions invoked.
  std::size_t backward(const Var<T>& out) {
    if (out.tape() != this) throw std::logic_error("backward on a value not recorded by this tape");
    if (out.size() != 1) throw DimensionError("backward needs a scalar output, got " + out.shape().to_string());
    for (auto& n : nodes_) n->grad = Tensor<T>();
    out.node()->grad = Tensor<T>(out.shape(), T(1));
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node<T>& n = **it;
      if (!n.backward || n.grad.empty()) continue;
      n.backward(n);
      ++visited;
    }
    return visited;
  }

  /// Gradient of the last backward pass with respect to `v`; exact zeros
  /// when `v` did not influence the output.
  Tensor<T> grad(const Var<T>& v) const {
    const auto& g = v.node()->grad;
    if (g.empty()) return Tensor<T>(v.shape(), T(0));
    return g;
  }

 private:
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

namespace detail {

/// Builds the result node of an op. When any input is tracked the node is
/// recorded with `backward`; otherwise the closure is dropped so no
/// activations are kept alive.
template <class T, class Backward>
Var<T> make_result(const char* op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs, Backward&& backward) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  Tape<T>* tape = nullptr;
  for (const Var<T>* in : inputs) {
    Tape<T>* t = in->tape();
    if (!t) continue;
    if (tape && t != tape) throw std::logic_error("operands recorded on different tapes");
    tape = t;
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  if (tape) {
    node->tape = tape;
    for (const Var<T>* in : inputs) node->parents.push_back(in->node());
    node->backward = std::forward<Backward>(backward);
    tape->record(node);
  }
  return Var<T>(std::move(node));
}

template <class T>
void push_grad(const std::shared_ptr<Node<T>>& parent, const Tensor<T>& g) {
  if (parent->tape) parent->accumulate(g);
}

}  // namespace detail

}  // namespace maskgen
