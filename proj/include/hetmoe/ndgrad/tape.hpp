#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hetmoe/ndgrad/tensor.hpp"

namespace hetmoe::ndgrad {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run gradient tape. Nodes are appended in evaluation order, so
/// every parent precedes its children and backward is a reverse sweep.
class Tape {
 public:
  /// Receives the gradient of the node's output; adds into parent grads.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  /// Leaf whose gradient is readable after backward().
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true, nullptr); }

  /// Leaf bound to a parameter. Its gradient is added into `p.grad` by
  /// backward(). Frozen parameters are recorded as constants.
  Var param(Parameter& p) {
    if (p.frozen) return constant(p.value);
    return push(p.value, {}, nullptr, true, &p);
  }

  /// Records an operation. The closure is kept only when some parent
  /// requires a gradient.
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_.at(p).requires_grad;
    if (!needs) return push(std::move(value), {}, nullptr, false, nullptr);
    return push(std::move(value), std::move(parents), std::move(fn), true, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_parameter(std::size_t id) const { return nodes_.at(id).param != nullptr; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Gradient of the last backward() root w.r.t. node `id`; zeros when the
  /// node was not reached.
  Tensor grad(Var v) const {
    check_owner(v);
    const auto& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Mutable gradient slot for a parent, allocated lazily.
  Tensor& grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  /// Reverse sweep from a scalar root. A tape can be swept once.
  void backward(Var root) {
    check_owner(root);
    if (consumed_) throw TapeError("backward called twice on the same tape");
    consumed_ = true;
    const auto& rv = nodes_[root.id].value;
    if (rv.size() != 1) throw TapeError("backward root must be a scalar, got shape " + shape_str(rv.shape()));
    if (!nodes_[root.id].requires_grad) return;
    grad_slot(root.id).fill(1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      // Closures only touch parents' slots; nodes never move during the sweep.
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        auto& pg = n.param->grad;
        if (pg.shape() != n.grad.shape()) pg = Tensor(n.grad.shape(), 0.0);
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

 private:
  friend struct Var;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool requires_grad, Parameter* p) {
    if (consumed_) throw TapeError("cannot record on a tape after backward");
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents), std::move(fn), p, requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw TapeError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace hetmoe::ndgrad
