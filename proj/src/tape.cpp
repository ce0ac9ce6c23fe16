#include "fusedet/tape.hpp"

#include <algorithm>

namespace fusedet {

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Var::grad() const { return tape_->grad(id_); }

Var Tape::push(Tensor value, bool requires_grad, Backprop backprop) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop) {
  bool any = std::any_of(inputs.begin(), inputs.end(), [this](const Var& v) { return requires_grad(v.id()); });
  return push(std::move(value), any, std::move(backprop));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backprop backprop) {
  bool any = std::any_of(inputs.begin(), inputs.end(), [this](const Var& v) { return requires_grad(v.id()); });
  return push(std::move(value), any, std::move(backprop));
}

Tensor Tape::grad(std::size_t id) const {
  const Node& node = nodes_.at(id);
  return node.has_grad ? node.grad : Tensor::zeros_like(node.value);
}

Tensor* Tape::grad_slot(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.requires_grad) return nullptr;
  if (!node.has_grad) {
    node.grad = Tensor::zeros_like(node.value);
    node.has_grad = true;
  }
  return &node.grad;
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::invalid_argument("backward: root belongs to a different tape");
  const Tensor& root_value = value(root.id());
  if (root_value.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_string(root_value.shape()));
  }
  for (Node& node : nodes_) {
    node.has_grad = false;
    node.grad = Tensor();
  }
  Tensor* seed = grad_slot(root.id());
  if (seed == nullptr) return;
  (*seed)[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.has_grad && node.backprop) node.backprop(*this, node.grad);
  }
}

}  // namespace fusedet
