#include "cpgg/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace cpgg {

namespace detail {
bool& grad_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

bool grad_enabled() { return detail::grad_flag(); }

NoGradGuard::NoGradGuard() : previous_(detail::grad_flag()) { detail::grad_flag() = false; }
NoGradGuard::~NoGradGuard() { detail::grad_flag() = previous_; }

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any trainable tensor");
  }

  // Post-order DFS gives a topological order with inputs before consumers.
  using NodeT = Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* n : order) {
    if (n->backward) n->grad = Tensor<Scalar>();
  }
  loss.node()->grad_buffer()[0] += Scalar(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    // Interior gradients are consumed exactly once.
    n->grad = Tensor<Scalar>();
  }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace cpgg
