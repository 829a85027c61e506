#include "privisp/enhancer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "privisp/error.hpp"
#include "privisp/ops.hpp"
#include "privisp/optim.hpp"

namespace privisp::enh {

using ad::Var;

UNet::UNet(Rng& rng, int w) : width_(w) {
  in_ = nn::Conv2d(3, w, 3, 1, 1, rng);
  d1_ = nn::Conv2d(w, 2 * w, 3, 2, 1, rng);
  d2_ = nn::Conv2d(2 * w, 2 * w, 3, 2, 1, rng);
  d3_ = nn::Conv2d(2 * w, 4 * w, 3, 2, 1, rng);
  d4_ = nn::Conv2d(4 * w, 4 * w, 3, 2, 1, rng);
  u3_ = nn::Conv2d(8 * w, 4 * w, 3, 1, 1, rng);
  u2_ = nn::Conv2d(6 * w, 2 * w, 3, 1, 1, rng);
  u1_ = nn::Conv2d(4 * w, 2 * w, 3, 1, 1, rng);
  u0_ = nn::Conv2d(3 * w, w, 3, 1, 1, rng);
  out_ = nn::Conv2d(w, 3, 1, 1, 0, rng);
  for (double& v : out_.weight.mutable_value().values()) v *= 0.1;
}

Var UNet::forward_raw(const Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3) throw ValidationError("enhancer expects [N,3,H,W]");
  const int h = s[2], w = s[3];
  const int ph = (h + 15) / 16 * 16, pw = (w + 15) / 16 * 16;
  constexpr double slope = 0.1;
  auto act = [](const Var& v) { return ad::leaky_relu(v, slope); };
  Var x = ad::pad_replicate(images, ph, pw);
  Var e0 = act(in_(ad::add_scalar(x, -0.5)));
  Var e1 = act(d1_(e0));
  Var e2 = act(d2_(e1));
  Var e3 = act(d3_(e2));
  Var e4 = act(d4_(e3));
  Var y = act(u3_(ad::concat_channels(ad::upsample_nearest2x(e4), e3)));
  y = act(u2_(ad::concat_channels(ad::upsample_nearest2x(y), e2)));
  y = act(u1_(ad::concat_channels(ad::upsample_nearest2x(y), e1)));
  y = act(u0_(ad::concat_channels(ad::upsample_nearest2x(y), e0)));
  // Residual on the input so an untrained model starts near the identity.
  return ad::crop(ad::add(x, out_(y)), h, w);
}

Var UNet::forward(const Var& images) const { return ad::clamp01(forward_raw(images)); }

std::vector<Var> UNet::parameters() const {
  std::vector<Var> p;
  for (const auto* l : {&in_, &d1_, &d2_, &d3_, &d4_, &u3_, &u2_, &u1_, &u0_, &out_})
    for (const Var& v : l->parameters()) p.push_back(v);
  return p;
}

UNet UNet::clone() const {
  UNet copy = *this;
  auto fresh = nn::clone_parameters(parameters());
  std::size_t i = 0;
  for (nn::Conv2d* l : {&copy.in_, &copy.d1_, &copy.d2_, &copy.d3_, &copy.d4_, &copy.u3_, &copy.u2_, &copy.u1_,
                        &copy.u0_, &copy.out_}) {
    l->weight = fresh[i++];
    l->bias = fresh[i++];
  }
  return copy;
}

Tensor build_mask(int height, int width, const det::Boxes& face_boxes) {
  Tensor m({1, 1, height, width}, 1.0);
  for (const auto& b : face_boxes) {
    for (int y = 0; y < height; ++y) {
      const double py = (y + 0.5) / height;
      if (py < b.y0() || py > b.y1()) continue;
      for (int x = 0; x < width; ++x) {
        const double px = (x + 0.5) / width;
        if (px >= b.x0() && px <= b.x1()) m.at(0, 0, y, x) = 0.0;
      }
    }
  }
  return m;
}

double masked_mae_loss(const Tensor& output, const Tensor& target, const Tensor& mask) {
  return ad::masked_mae(ad::constant(output), target, mask).item();
}

Tensor masks_for(const std::vector<det::DetectionSample>& samples) {
  std::vector<Tensor> parts;
  for (const auto& s : samples) parts.push_back(build_mask(s.image.dim(2), s.image.dim(3), s.faces));
  return Tensor::stack(parts);
}

std::vector<double> train_enhancer(UNet& model, const Tensor& images, const ImageFn& capture_fn, const Tensor& masks,
                                   const EnhancerConfig& cfg) {
  const int n = images.dim(0);
  if (masks.rank() != 4 || masks.dim(0) != n || masks.dim(1) != 1 || masks.dim(2) != images.dim(2) ||
      masks.dim(3) != images.dim(3))
    throw ValidationError("train_enhancer: one [1,H,W] mask per image required");
  auto params = model.parameters();
  nn::set_requires_grad(params, true);
  optim::Adam opt(params, cfg.lr, cfg.weight_decay, true);
  // Captures are fixed for a fixed capture function; compute them once.
  const Tensor captured = capture_fn ? capture_fn(images) : images;
  Rng rng(cfg.seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    int batches = 0;
    for (int b = 0; b < n; b += cfg.batch_size) {
      std::vector<Tensor> xs, ts, ms;
      for (int i = b; i < std::min(n, b + cfg.batch_size); ++i) {
        xs.push_back(captured.slice_batch(order[i]));
        ts.push_back(images.slice_batch(order[i]));
        ms.push_back(masks.slice_batch(order[i]));
      }
      opt.zero_grad();
      Var loss = ad::masked_mae(model.forward_raw(ad::constant(Tensor::stack(xs))), Tensor::stack(ts), Tensor::stack(ms));
      if (!std::isfinite(loss.item())) throw DivergenceError("enhancer loss became non-finite at epoch " + std::to_string(e));
      ad::backward(loss);
      opt.step();
      total += loss.item();
      ++batches;
    }
    history.push_back(total / std::max(1, batches));
  }
  return history;
}

Tensor enhance(const UNet& model, const Tensor& captured, int chunk) {
  std::vector<Tensor> parts;
  const int n = captured.dim(0);
  for (int b = 0; b < n; b += chunk)
    parts.push_back(model.forward(ad::constant(captured.slice_batch(b, std::min(n, b + chunk)))).value());
  return Tensor::stack(parts);
}

}  // namespace privisp::enh
