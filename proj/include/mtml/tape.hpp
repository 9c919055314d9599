#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "mtml/tensor.hpp"

namespace mtml {

template <typename T>
class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return tape_->value(id_).shape(); }
  // Gradient after Tape::backward; zeros for nodes the loss does not reach.
  const Tensor<T>& grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records differentiable operations in execution order. Creation order is a
// topological order, so backward() is a single reverse sweep.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_.at(p).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, std::move(parents), needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }

  const Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  // Gradient accumulator for a parent, or nullptr when it needs none.
  Tensor<T>* grad_sink(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return &n.grad;
  }

  void backward(const Var<T>& loss) {
    MTML_CHECK(loss.valid() && &loss.tape() == this, ErrorCode::ShapeError, "loss does not belong to this tape");
    Node& root = nodes_.at(loss.id());
    MTML_CHECK(root.value.numel() == 1, ErrorCode::ShapeError,
               "backward needs a scalar loss, got " + shape_str(root.value.shape()));
    for (Node& n : nodes_) n.grad = Tensor<T>();
    root.grad = Tensor<T>(root.value.shape(), T(1));
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

}  // namespace mtml
