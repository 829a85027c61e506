#pragma once

#include <functional>
#include <vector>

#include "privisp/detection.hpp"
#include "privisp/nn.hpp"
#include "privisp/rng.hpp"

namespace privisp::enh {

/// Encoder-decoder with four stride-2 stages and skip connections. Inputs
/// are replicate-padded to a multiple of 16 and cropped back, so any H, W work.
class UNet {
 public:
  explicit UNet(Rng& rng, int width = 8);

  /// Unclamped prediction, used by the training loss.
  ad::Var forward_raw(const ad::Var& images) const;
  /// forward_raw clamped to [0,1].
  ad::Var forward(const ad::Var& images) const;
  std::vector<ad::Var> parameters() const;
  UNet clone() const;
  int width() const { return width_; }

 private:
  int width_;
  nn::Conv2d in_, d1_, d2_, d3_, d4_, u3_, u2_, u1_, u0_, out_;
};

/// [1,1,h,w] mask: 0 where a pixel centre lies inside any box, 1 elsewhere.
Tensor build_mask(int height, int width, const det::Boxes& face_boxes);

/// Mean over pixels and channels of s*|out - target| + (1 - s)*|out|.
double masked_mae_loss(const Tensor& output, const Tensor& target, const Tensor& mask);

using ImageFn = std::function<Tensor(const Tensor&)>;

struct EnhancerConfig {
  int epochs = 1000;
  int batch_size = 8;
  double lr = 3e-4;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
};

/// AdamW on masked MAE between model(capture_fn(x)) and x. `masks` is
/// [N,1,H,W]; pass all-ones masks for plain MAE. Returns mean loss per epoch.
std::vector<double> train_enhancer(UNet& model, const Tensor& images, const ImageFn& capture_fn, const Tensor& masks,
                                   const EnhancerConfig& config);

Tensor enhance(const UNet& model, const Tensor& captured, int chunk = 16);

/// Mask tensor [N,1,H,W] for detection samples from their face boxes.
Tensor masks_for(const std::vector<det::DetectionSample>& samples);

}  // namespace privisp::enh
