#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "fusedet/tensor.hpp"

namespace fusedet {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient from the most recent backward pass (zeros if unreached).
  Tensor grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in creation order, which is
/// a topological order, so backward is a single reverse sweep.
class Tape {
 public:
  /// Propagates the output gradient into the input gradient slots.
  using Backprop = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. The node requires grad iff any input does; the backprop
  /// closure is dropped otherwise.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop);
  Var record(Tensor value, const std::vector<Var>& inputs, Backprop backprop);

  /// Reverse sweep from a single-element root. Resets all gradients first, so the
  /// tape can be swept repeatedly from different roots.
  void backward(const Var& root);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }
  Tensor grad(std::size_t id) const;

  /// Gradient accumulator for node `id`, allocated on first use; nullptr when the
  /// node does not require grad.
  Tensor* grad_slot(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    bool has_grad = false;
    Tensor grad;
    Backprop backprop;
  };

  Var push(Tensor value, bool requires_grad, Backprop backprop);

  std::vector<Node> nodes_;
};

}  // namespace fusedet
