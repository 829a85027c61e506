#pragma once

#include <vector>

#include "privisp/autograd.hpp"

namespace privisp::optim {

using ad::Var;

class Optimizer {
 public:
  explicit Optimizer(std::vector<Var> params) : params_(std::move(params)) {}
  virtual ~Optimizer() = default;

  /// Applies one update from the accumulated gradients.
  virtual void step() = 0;
  void zero_grad();

  double learning_rate() const noexcept { return lr_; }
  void set_learning_rate(double lr) noexcept { lr_ = lr; }
  const std::vector<Var>& parameters() const noexcept { return params_; }

 protected:
  std::vector<Var> params_;
  double lr_ = 0.0;
};

/// Momentum gradient descent with optional L2 weight decay folded into the gradient.
class SGD : public Optimizer {
 public:
  SGD(std::vector<Var> params, double lr, double momentum = 0.9, double weight_decay = 0.0);
  void step() override;

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

/// Adaptive-moment optimiser. With `decoupled` set, weight decay is applied
/// directly to the weights (AdamW) instead of through the gradient.
class Adam : public Optimizer {
 public:
  Adam(std::vector<Var> params, double lr, double weight_decay = 0.0, bool decoupled = false, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step() override;

  /// Applies an externally supplied gradient per parameter (used when the
  /// protector combines two backward passes).
  void step_with(const std::vector<Tensor>& grads);

 private:
  double weight_decay_;
  bool decoupled_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace privisp::optim
