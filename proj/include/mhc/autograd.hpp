#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mhc/tensor.hpp"

namespace mhc {

/// One value in the reverse-mode tape. Leaves (parameters, inputs) carry no
/// backward function; interior nodes hold the closure that pushes their
/// gradient into `inputs`.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

/// Thread-local switch that stops ops from recording the tape.
class GradMode {
 public:
  static bool enabled() noexcept { return flag(); }
  static void set(bool on) noexcept { flag() = on; }

 private:
  static bool& flag() noexcept {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a tape node. Copies share the node, so a parameter Var held by
/// a layer and by the optimizer refer to the same storage.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value[0]; }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

  void zero_grad() {
    if (node_->grad.size() == node_->value.size()) node_->grad.fill(T{0});
  }

  /// Reverse sweep from a scalar. Interior gradients and saved closures are
  /// released as the sweep passes them; leaf gradients accumulate.
  void backward(T seed = T{1}) const {
    MHC_CHECK(node_->value.size() == 1, ShapeError,
              "backward: root must be a scalar, got " + shape_str(node_->value.shape()));
    if (!node_->requires_grad) return;

    // Shared ownership keeps nodes alive after a consumer drops its inputs.
    using NodePtr = std::shared_ptr<Node<T>>;
    std::vector<NodePtr> order;
    std::unordered_set<Node<T>*> seen{node_.get()};
    std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->inputs.size()) {
        NodePtr child = top.first->inputs[top.second++];
        if (child && child->requires_grad && seen.insert(child.get()).second) {
          stack.emplace_back(std::move(child), 0);
        }
      } else {
        order.push_back(std::move(top.first));
        stack.pop_back();
      }
    }

    node_->grad_buffer()[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = it->get();
      if (n->is_leaf()) continue;
      if (n->grad.size() == n->value.size()) n->backward(*n);
      n->backward = nullptr;
      n->inputs.clear();
      n->grad = Tensor<T>();
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

/// Wraps an op result, attaching `backward` only when recording is on and
/// some input needs a gradient.
template <typename T, typename Backward>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs, Backward&& backward) {
  Var<T> out(std::move(value));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  Node<T>* n = out.node();
  n->requires_grad = true;
  n->inputs.reserve(inputs.size());
  for (auto& in : inputs) n->inputs.push_back(in.shared());
  n->backward = std::forward<Backward>(backward);
  return out;
}

/// Gradient buffer of input `i` if it wants one, else nullptr.
template <typename T>
Tensor<T>* input_grad(Node<T>& self, std::size_t i) {
  auto& in = self.inputs.at(i);
  return in && in->requires_grad ? &in->grad_buffer() : nullptr;
}

}  // namespace mhc
