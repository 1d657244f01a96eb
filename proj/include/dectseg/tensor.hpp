#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dectseg/volume.hpp"

namespace dectseg {

using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;
  std::uint64_t backward_visits = 0;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
  }
};

}  // namespace detail

/// Shared handle to an N-d array that takes part in a reverse-mode graph.
/// Copies alias the same storage; use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodePtr = std::shared_ptr<detail::Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad = false);

  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false) { return full({1}, value, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t ndim() const { return node_->shape.size(); }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<const Scalar> data() const { return node_->value; }
  /// Direct write access; bypasses the graph (optimizers, initialisation).
  std::span<Scalar> mutable_data() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient accumulator; all zeros until a backward pass reaches it.
  std::span<const Scalar> grad() const;
  std::span<Scalar> mutable_grad();
  void zero_grad();

  Scalar item() const;

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Deep copy of the values, detached from any graph.
  Tensor clone(bool requires_grad = false) const;

  /// Number of times a backward sweep has processed this node.
  std::uint64_t backward_visits() const { return node_->backward_visits; }

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

namespace detail {

/// Builds an op result. When recording is on and any input requires a
/// gradient, the node keeps its inputs and backward function. Throws
/// DomainError when the values contain NaN or Inf.
template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, std::vector<Scalar> values,
                           std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                           std::function<void(Node<Scalar>&)> backward);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dectseg
