#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cnc/core/tensor.hpp"

namespace cnc {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for the lifetime of the guard (inference, sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

/// Handle to a value in the reverse-mode graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }
  static Var parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T(0));
  }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Create an op result. Records the backward closure only when some input needs a gradient.
template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (!grad_enabled()) return Var<T>(std::move(node));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return Var<T>(std::move(node));
  node->requires_grad = true;
  for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  node->backward = std::forward<Backward>(backward);
  return Var<T>(std::move(node));
}

template <typename T, typename Backward>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (!grad_enabled()) return Var<T>(std::move(node));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return Var<T>(std::move(node));
  node->requires_grad = true;
  for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  node->backward = std::forward<Backward>(backward);
  return Var<T>(std::move(node));
}

/// Gradient sink for input `k` of `self`, or nullptr when that input is not differentiable.
template <typename T>
Tensor<T>* grad_sink(Node<T>& self, std::size_t k) {
  auto& in = *self.inputs[k];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

/// Reverse-mode sweep from a scalar (or seeded) output. Parameter gradients accumulate.
template <typename T>
void backward(Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root.node(), 0}};
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = root.node().ensure_grad();
  if (seed) {
    require(seed->size() == g.size(), ErrorKind::shape, "backward seed shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
  } else {
    for (auto& v : g.storage()) v += T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
  // Intermediate gradients are no longer needed; parameters (leaves) keep theirs.
  for (Node<T>* node : order) {
    if (!node->inputs.empty()) node->grad = Tensor<T>();
  }
}

}  // namespace cnc
