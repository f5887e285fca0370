#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tsmi/tensor.hpp"

namespace tsmi {

template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void()> backward;

  Tensor<Real>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Real>(value.shape());
    return grad;
  }
};

/// Handle to a value that may participate in reverse-mode differentiation.
/// Copies share the underlying node.
template <typename Real>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Real> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Real>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<Real>& value() const { return node_->value; }
  Tensor<Real>& mutable_value() { return node_->value; }
  const Tensor<Real>& grad() const { return node_->grad; }
  Tensor<Real>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  void zero_grad() { node_->grad = Tensor<Real>(); }
  bool valid() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node<Real>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Real>> node_;
};

/// Ordered record of differentiable operations for one forward pass.
/// Recording happens only on the thread that has the tape active (see
/// TapeScope); other threads run forwards on the same parameters untaped.
template <typename Real>
class Tape {
 public:
  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void push(std::shared_ptr<Node<Real>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(const Var<Real>& loss) {
    if (loss.size() != 1) throw DimensionError("backward requires a scalar loss, got " +
                                               shape_str(loss.shape()));
    loss.node()->grad_buffer()[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<Real>& n = **it;
      if (n.backward && n.grad.size() == n.value.size()) n.backward();
    }
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::shared_ptr<Node<Real>>> nodes_;
};

template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape) : previous_(Tape<Real>::active()) {
    Tape<Real>::active() = &tape;
  }
  ~TapeScope() { Tape<Real>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

namespace detail {

/// Wraps an op result. When a tape is active and any input needs a gradient
/// the node is recorded with `bw(out_grad)` as its backward step.
template <typename Real, typename Backward>
Var<Real> make_result(Tensor<Real> value, std::initializer_list<const Var<Real>*> inputs,
                      Backward&& bw) {
  Var<Real> out(std::move(value));
  Tape<Real>* tape = Tape<Real>::active();
  if (!tape) return out;
  bool needs = false;
  for (const Var<Real>* in : inputs) needs = needs || (in && in->requires_grad());
  if (!needs) return out;
  Node<Real>* raw = out.node().get();
  raw->requires_grad = true;
  raw->backward = [raw, fn = std::forward<Backward>(bw)]() { fn(raw->grad); };
  tape->push(out.node());
  return out;
}

template <typename Real>
Real* grad_if(const Var<Real>& v) {
  return v.requires_grad() ? v.node()->grad_buffer().data() : nullptr;
}

}  // namespace detail

}  // namespace tsmi
