#include "dectseg/tensor.hpp"

#include <Eigen/Core>
#include <unordered_set>

namespace dectseg {

Index shape_numel(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  Index n = 1;
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive: " + shape_string(shape));
    n *= e;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace {
thread_local bool g_record = true;
}

NoGradGuard::NoGradGuard() : previous_(g_record) { g_record = false; }
NoGradGuard::~NoGradGuard() { g_record = previous_; }
bool grad_recording_enabled() { return g_record; }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<Scalar>(static_cast<std::size_t>(shape_numel(shape)), Scalar(0)), requires_grad) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  if (static_cast<Index>(values.size()) != shape_numel(shape)) {
    throw ShapeError("tensor value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_string(shape));
  }
  node_ = std::make_shared<detail::Node<Scalar>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
}

template <typename Scalar>
std::span<const Scalar> Tensor<Scalar>::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

template <typename Scalar>
std::span<Scalar> Tensor<Scalar>::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  node_->grad.assign(node_->value.size(), Scalar(0));
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on a tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  using NodeT = detail::Node<Scalar>;
  if (numel() != 1) throw ShapeError("backward() needs a scalar, got shape " + shape_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), Scalar(0));
  }
  node_->ensure_grad();
  node_->grad[0] += Scalar(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    ++node->backward_visits;
    if (!node->is_leaf()) {
      for (auto& in : node->inputs) {
        if (in && in->requires_grad) in->ensure_grad();
      }
      node->backward(*node);
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone(bool requires_grad) const {
  return Tensor(shape(), node_->value, requires_grad);
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, std::vector<Scalar> values,
                           std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                           std::function<void(Node<Scalar>&)> backward) {
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  if (!Eigen::Map<const Arr>(values.data(), static_cast<Index>(values.size())).allFinite()) {
    throw DomainError(std::string("non-finite value produced by ") + op);
  }
  Tensor<Scalar> out(std::move(shape), std::move(values));
  bool needs_grad = false;
  if (grad_recording_enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || (in && in->requires_grad);
  }
  if (needs_grad) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  return out;
}

template Tensor<float> make_result(const char*, Shape, std::vector<float>, std::vector<std::shared_ptr<Node<float>>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::vector<std::shared_ptr<Node<double>>>, std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace dectseg
