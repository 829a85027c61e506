#include "privisp/nn.hpp"

#include <cmath>
#include <cstring>

#include "privisp/error.hpp"
#include "privisp/ops.hpp"

namespace privisp::nn {

namespace {

Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std = std::sqrt(2.0 / fan_in);
  for (double& v : t.values()) v = rng.normal(0.0, std);
  return t;
}

}  // namespace

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int pad_, Rng& rng)
    : weight(he_normal({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng), true),
      bias(Tensor({out_channels}), true),
      stride(stride_),
      pad(pad_) {}

Var Conv2d::operator()(const Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }

Linear::Linear(int in_features, int out_features, Rng& rng, bool with_bias, double init_std) {
  if (init_std < 0) {
    weight = Var(he_normal({out_features, in_features}, in_features, rng), true);
  } else {
    Tensor w({out_features, in_features});
    for (double& v : w.values()) v = rng.normal(0.0, init_std);
    weight = Var(std::move(w), true);
  }
  if (with_bias) bias = Var(Tensor({out_features}), true);
}

Var Linear::operator()(const Var& x) const { return ad::linear(x, weight, bias); }

std::vector<Var> Linear::parameters() const {
  if (bias.defined()) return {weight, bias};
  return {weight};
}

std::vector<Tensor> snapshot(const std::vector<Var>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& p : params) out.push_back(p.value());
  return out;
}

void restore(const std::vector<Var>& params, const std::vector<Tensor>& values) {
  if (params.size() != values.size()) throw ValidationError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i];
    if (!p.value().same_shape(values[i])) throw ValidationError("restore: shape mismatch");
    p.mutable_value() = values[i];
  }
}

bool unchanged(const std::vector<Var>& params, const std::vector<Tensor>& values) {
  if (params.size() != values.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& a = params[i].value();
    if (!a.same_shape(values[i])) return false;
    if (std::memcmp(a.ptr(), values[i].ptr(), a.numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

std::vector<Var> clone_parameters(const std::vector<Var>& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const Var& p : params) out.emplace_back(p.value(), p.requires_grad());
  return out;
}

void set_requires_grad(const std::vector<Var>& params, bool on) {
  for (Var p : params) p.set_requires_grad(on);
}

void zero_grad(const std::vector<Var>& params) {
  for (Var p : params) p.zero_grad();
}

std::size_t parameter_count(const std::vector<Var>& params) {
  std::size_t n = 0;
  for (const Var& p : params) n += p.value().numel();
  return n;
}

std::vector<std::vector<double>> flatten_values(const std::vector<Var>& params) {
  std::vector<std::vector<double>> out;
  for (const Var& p : params) out.push_back(p.value().storage());
  return out;
}

void load_values(const std::vector<Var>& params, const std::vector<std::vector<double>>& values,
                 const std::string& what) {
  if (params.size() != values.size())
    throw ParseError(what, "expected " + std::to_string(params.size()) + " parameter arrays, got " +
                               std::to_string(values.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i];
    if (values[i].size() != p.value().numel())
      throw ParseError(what + "[" + std::to_string(i) + "]", "expected " + std::to_string(p.value().numel()) +
                                                                 " values, got " + std::to_string(values[i].size()));
    p.mutable_value().storage() = values[i];
  }
}

}  // namespace privisp::nn
