#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tempokey/tensor.hpp"

namespace tk {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the grads of self.parents.
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename T>
class Var {
 public:
  using value_type = T;

  Var() : node_(std::make_shared<Node<T>>()) {}

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  // Accumulated gradient; empty when nothing flowed into this node.
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad() { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_graph() const { return static_cast<bool>(node_->backward); }

  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Wraps a freshly computed value as an op output. The backward closure is only
// recorded when at least one input takes part in differentiation.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

// Accumulate d(loss)/d(node) for every node reachable from a scalar loss.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!loss.has_graph()) {
    throw GraphError("backward: tensor has no recorded graph");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

}  // namespace tk
