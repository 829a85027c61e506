#pragma once

#include <span>
#include <vector>

#include "privisp/autograd.hpp"

// Differentiable tensor operations. Image-like tensors are NCHW.
namespace privisp::ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
/// clip to [0,1]; derivative 1 on [0,1], 0 elsewhere.
Var clamp01(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

/// x [N,Cin,H,W], w [Cout,Cin,k,k], b [Cout] (may be undefined).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
/// x [N,in], w [out,in], b [out] (may be undefined).
Var linear(const Var& x, const Var& w, const Var& b);

Var reshape(const Var& x, std::vector<int> shape);
/// [N, ...] -> [N, rest].
Var flatten(const Var& x);
Var upsample_nearest2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);
/// Replicate-pads at the bottom/right up to (h, w).
Var pad_replicate(const Var& x, int h, int w);
/// Keeps the top-left (h, w) window.
Var crop(const Var& x, int h, int w);
Var global_avg_pool(const Var& x);
/// Row-wise L2 normalisation of [N,D] with a 1e-12 norm floor.
Var l2_normalize_rows(const Var& x);

/// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy(const Var& logits, std::span<const int> labels);
/// Mean over the batch of -log(max(1 - softmax(logits)[label], 1e-12)).
Var non_saturated_loss(const Var& logits, std::span<const int> labels);
/// Additive angular margin logits: s*cos(theta_y + m) on the label column,
/// s*cos(theta_j) elsewhere. features [N,D], weight [C,D]; both normalised inside.
Var angular_margin_logits(const Var& features, const Var& weight, std::span<const int> labels, double scale,
                          double margin);
/// mean over N*C*H*W of s*|out - target| + (1 - s)*|out|; mask [N,1,H,W].
Var masked_mae(const Var& out, const Tensor& target, const Tensor& mask);

}  // namespace privisp::ad
