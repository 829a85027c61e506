#pragma once

#include <string>
#include <vector>

#include "privisp/autograd.hpp"
#include "privisp/rng.hpp"

namespace privisp::nn {

using ad::Var;

/// Square-kernel 2-D convolution with bias, He-normal initialised.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, Rng& rng);

  Var operator()(const Var& x) const;
  std::vector<Var> parameters() const { return {weight, bias}; }

  Var weight;
  Var bias;
  int stride = 1;
  int pad = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng, bool with_bias = true, double init_std = -1.0);

  Var operator()(const Var& x) const;
  std::vector<Var> parameters() const;

  Var weight;
  Var bias;
};

/// Deep copies of parameter values, used for snapshots and isolation checks.
std::vector<Tensor> snapshot(const std::vector<Var>& params);
void restore(const std::vector<Var>& params, const std::vector<Tensor>& values);
/// Byte-level equality of current parameter values against a snapshot.
bool unchanged(const std::vector<Var>& params, const std::vector<Tensor>& values);
/// Fresh leaf vars holding copies of the values (for cloning a model).
std::vector<Var> clone_parameters(const std::vector<Var>& params);
void set_requires_grad(const std::vector<Var>& params, bool on);
void zero_grad(const std::vector<Var>& params);
std::size_t parameter_count(const std::vector<Var>& params);

/// Plain-array view used by checkpoint files.
std::vector<std::vector<double>> flatten_values(const std::vector<Var>& params);
void load_values(const std::vector<Var>& params, const std::vector<std::vector<double>>& values,
                 const std::string& what);

}  // namespace privisp::nn
