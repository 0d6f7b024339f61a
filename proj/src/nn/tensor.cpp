#include "scgan/nn/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace scgan::nn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  std::vector<T> v(numel(shape), value);
  return constant(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return constant(node_->shape, node_->value);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t = constant(node_->shape, node_->value);
  t.node_->requires_grad = node_->requires_grad;
  t.node_->grad = node_->grad;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::make(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                          std::function<void(Node<T>&)> backward) {
  Tensor out = constant(std::move(shape), std::move(values));
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (track) {
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  }
  return out;
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (root.size() != 1) throw ShapeError("backward() requires a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace scgan::nn
