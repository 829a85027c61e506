#include "privisp/optim.hpp"

#include <cmath>

#include "privisp/error.hpp"

namespace privisp::optim {

void Optimizer::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

SGD::SGD(std::vector<Var> params, double lr, double momentum, double weight_decay)
    : Optimizer(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  lr_ = lr;
  for (const Var& p : params_) velocity_.emplace_back(p.value().shape());
}

void SGD::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var& p = params_[k];
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    Tensor& v = velocity_[k];
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double gi = g[i] + weight_decay_ * w[i];
      v[i] = momentum_ * v[i] + gi;
      w[i] -= lr_ * v[i];
    }
  }
}

Adam::Adam(std::vector<Var> params, double lr, double weight_decay, bool decoupled, double beta1, double beta2,
           double eps)
    : Optimizer(std::move(params)),
      weight_decay_(weight_decay),
      decoupled_(decoupled),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  lr_ = lr;
  for (const Var& p : params_) {
    m_.emplace_back(p.value().shape());
    v_.emplace_back(p.value().shape());
  }
}

void Adam::step() {
  std::vector<Tensor> grads;
  grads.reserve(params_.size());
  for (const Var& p : params_) grads.push_back(p.grad());
  step_with(grads);
}

void Adam::step_with(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw ValidationError("Adam::step_with: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = params_[k].mutable_value();
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < w.numel(); ++i) {
      double gi = g[i];
      if (!decoupled_) gi += weight_decay_ * w[i];
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * gi;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m_[k][i] / bc1;
      const double vhat = v_[k][i] / bc2;
      if (decoupled_) w[i] -= lr_ * weight_decay_ * w[i];
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace privisp::optim
