#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <vector>

#include "saerec/numerics/tensor.hpp"

namespace saerec::numerics {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Reverse-mode gradient tape. Values are recorded in evaluation order and
/// backward() visits every recorded node once, newest first.
///
/// A tape and the tensors it owns belong to a single thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// A value that never receives a gradient.
  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// A leaf whose gradient is accumulated by backward().
  Var parameter(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  /// Like constant()/parameter() but referencing a tensor owned elsewhere,
  /// which must outlive the tape and stay unmodified while it is in use.
  Var constant_view(const Tensor<T>& value) { return push_view(value, false); }
  Var parameter_view(const Tensor<T>& value) { return push_view(value, true); }

  /// Records the output of a primitive. The backward function is kept only
  /// if some input requires a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    check_finite(value, "tape op");
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.view ? *n.view : n.value;
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Gradient accumulated for v. Zero when v did not influence the loss.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(value(v).shape());
    return n.grad;
  }

  /// Mutable gradient slot, allocated on first use. For primitives only.
  Tensor<T>& grad_slot(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  void backward(Var loss) {
    if (consumed_) throw TapeError("backward called twice on the same tape");
    const Node& root = nodes_.at(loss.id);
    if (value(loss).size() != 1) {
      throw TapeError("backward requires a scalar loss, got shape " + shape_to_string(value(loss).shape()));
    }
    consumed_ = true;
    if (!root.requires_grad) return;
    grad_slot(loss).fill(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) {
        n.backward(*this, Var{static_cast<std::uint32_t>(i)});
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* view = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, nullptr, requires_grad, std::move(backward)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push_view(const Tensor<T>& value, bool requires_grad) {
    nodes_.push_back(Node{Tensor<T>{}, Tensor<T>{}, &value, requires_grad, nullptr});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace saerec::numerics
