#pragma once

#include <unordered_set>
#include <vector>

#include "cgdmer/numerics/tensor.hpp"

namespace cgdmer {

/// Nodes reachable from `root` that take part in differentiation, in a valid
/// evaluation order (every node after all of its parents).
template <typename T>
std::vector<Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  if (!root.requires_grad()) return order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; graphs from long token sequences are deep.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse-mode pass from a scalar root. Leaf gradients accumulate across
/// calls until zero_grad(); intermediate nodes release their history.
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order = topological_order(root);
  Node<T>* r = root.node();
  r->ensure_grad();
  r->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->released) throw std::logic_error("backward: graph already consumed at op " + std::string(n->op));
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->released = true;
    }
  }
}

}  // namespace cgdmer
