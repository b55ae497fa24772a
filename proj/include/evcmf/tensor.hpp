#pragma once

// Dense row-major tensor with tape-free reverse-mode differentiation.
//
// Every tensor produced by an operation owns a node recording its parents and
// a closure that propagates the node's gradient back into them. Calling
// backward() on a scalar walks the graph in reverse topological order.
// Values are never modified after construction, except for parameter leaves
// which the optimizer and the gradient checker update in place.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "evcmf/error.hpp"

namespace evcmf {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Thread-local switch controlling whether new results record a graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set_enabled(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, zero-initialised on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;
  using NodePtr = std::shared_ptr<Node>;
  using value_type = T;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (element_count(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = element_count(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }

  static Tensor scalar(T value) { return from_data({1}, {value}); }

  /// Builds an operation result. The graph is recorded only when grad mode is
  /// on and at least one parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                            std::function<void(Node&)> backward_fn) {
    auto out = from_data(std::move(shape), std::move(data));
    if (!GradMode::enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// In-place access for parameter leaves (optimizer updates, perturbation).
  std::span<T> mutable_data() { return node_->data; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  Node& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

  /// Reverse-mode sweep from a single-element tensor. Leaf gradients
  /// accumulate across calls; call zero_grad() between independent passes.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  /// Copy with a different scalar type, as a fresh leaf.
  template <typename U>
  Tensor<U> cast(bool requires_grad) const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>::from_data(shape(), std::move(out), requires_grad);
  }

 private:
  NodePtr node_;
};

}  // namespace evcmf
