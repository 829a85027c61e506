#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "privisp/tensor.hpp"

namespace privisp::ad {

/// One value on the tape. `backward_fn` reads `grad` and accumulates into
/// the gradients of `inputs` that require them.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& ensure_grad();
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  /// Accumulated gradient; zeros if nothing has flowed here yet.
  const Tensor& grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();

  const std::vector<int>& shape() const { return node_->value.shape(); }
  double item() const;
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates an interior node. Gradient tracking is on if any input tracks.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// Reverse sweep from a scalar root, seeding d(root)/d(root) = 1.
void backward(const Var& root);

/// Leaf with the same value and no history.
inline Var constant(Tensor value) { return Var(std::move(value), false); }
inline Var detach(const Var& v) { return Var(v.value(), false); }

}  // namespace privisp::ad
