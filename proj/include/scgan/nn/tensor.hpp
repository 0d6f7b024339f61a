#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a cheap shared handle to a graph Node. Operations record their
// inputs and a backward closure only when at least one input requires a
// gradient, so inference code builds no graph at all.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scgan::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the value with no graph history.
  Tensor detach() const;
  // Deep copy preserving requires_grad (used to snapshot parameters).
  Tensor clone() const;
  T item() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Builds an op result. The graph edge is recorded only if some input
  // requires a gradient.
  static Tensor make(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                     std::function<void(Node<T>&)> backward);

 private:
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<Node<T>> node_;
};

// Back-propagates from a scalar root, accumulating into every reachable
// node that requires a gradient.
template <typename T>
void backward(const Tensor<T>& root);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace scgan::nn
