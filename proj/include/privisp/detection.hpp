#pragma once

#include <functional>
#include <vector>

#include "privisp/autograd.hpp"
#include "privisp/nn.hpp"
#include "privisp/rng.hpp"
#include "privisp/tensor.hpp"

namespace privisp::det {

/// Axis-aligned box in normalised image coordinates (centre and size).
struct BoundingBox {
  double cx = 0, cy = 0, w = 0, h = 0;
  double confidence = 1.0;
  int cls = 0;

  double x0() const { return cx - w / 2; }
  double y0() const { return cy - h / 2; }
  double x1() const { return cx + w / 2; }
  double y1() const { return cy + h / 2; }
  static BoundingBox from_corners(double x0, double y0, double x1, double y1, double confidence = 1.0);
  /// Throws ValidationError unless w, h > 0 and the box overlaps the unit square.
  void validate() const;
};

using Boxes = std::vector<BoundingBox>;

struct DetectionSample {
  Tensor image;  ///< [1,3,H,W]
  Boxes boxes;   ///< persons
  Boxes faces;   ///< face regions, consumed by the enhancer mask builder
  std::string source;
};

double iou(const BoundingBox& a, const BoundingBox& b);

/// Greedy non-maximum suppression by descending confidence.
Boxes nms(Boxes boxes, double iou_threshold);

struct DetectionLoss {
  ad::Var cls;
  ad::Var box;
  ad::Var total() const;
};

class DetectorModel {
 public:
  virtual ~DetectorModel() = default;
  /// Per-image detections for [N,3,H,W].
  virtual std::vector<Boxes> detect(const Tensor& images) = 0;
  /// Differentiable w.r.t. the parameters and the image node.
  virtual DetectionLoss loss(const ad::Var& images, const std::vector<Boxes>& ground_truth) = 0;
  virtual std::vector<ad::Var> parameters() const = 0;
};

/// Dense targets for a centre-heatmap detector on a grid of stride `stride`.
struct CenterTargets {
  Tensor heatmap;   ///< [N,1,G,G], exactly 1 at object centres
  Tensor regress;   ///< [N,4,G,G]: offset x, offset y, width, height (grid units)
  Tensor positive;  ///< [N,1,G,G] in {0,1}
  int objects = 0;
};
CenterTargets center_targets(const std::vector<Boxes>& ground_truth, int batch, int grid_h, int grid_w);

/// Penalty-reduced focal loss on channel 0 and L1 regression on channels 1..4
/// of a raw head output [N,5,G,G]; both normalised by the object count.
DetectionLoss center_loss(const ad::Var& head_output, const CenterTargets& targets, double size_weight = 0.1);

/// Peak extraction (3x3 local maxima), box decoding and NMS.
std::vector<Boxes> decode_center_output(const Tensor& head_output, double min_confidence = 0.05,
                                        double nms_iou = 0.5, int max_detections = 20);

/// Small anchor-free single-class detector: three stride-2 convolutions, one
/// stride-1 refinement convolution and a 1x1 head (heatmap + box).
class CenterDetector : public DetectorModel {
 public:
  CenterDetector(Rng& rng, int width = 16);

  ad::Var forward(const ad::Var& images) const;
  std::vector<Boxes> detect(const Tensor& images) override;
  DetectionLoss loss(const ad::Var& images, const std::vector<Boxes>& ground_truth) override;
  std::vector<ad::Var> parameters() const override;
  CenterDetector clone() const;
  int width() const { return width_; }

  static constexpr int kStride = 8;

 private:
  int width_;
  nn::Conv2d c1_, c2_, c3_, c4_, head_;
};

struct DetectionMetrics {
  double ap = 0, ap50 = 0, ap75 = 0;
  double precision = 0, recall = 0, f1 = 0;
};

struct OperatingPoint {
  double min_confidence = 0.25;
  double iou = 0.5;
};

/// COCO-style AP averaged over IoU 0.50:0.05:0.95 with 101-point interpolated
/// precision, plus precision/recall/F1 at one operating point.
DetectionMetrics evaluate_predictions(const std::vector<Boxes>& predictions, const std::vector<Boxes>& ground_truth,
                                      const OperatingPoint& op = {});
/// AP at a single IoU threshold.
double average_precision(const std::vector<Boxes>& predictions, const std::vector<Boxes>& ground_truth,
                         double iou_threshold);

using ImageFn = std::function<Tensor(const Tensor&)>;

DetectionMetrics evaluate_detection(DetectorModel& model, const std::vector<DetectionSample>& samples,
                                    const ImageFn& protect_fn = {}, const OperatingPoint& op = {});

/// Replaces ground truth with the model's own detections scoring strictly above 0.5.
std::vector<DetectionSample> pseudo_ground_truth(DetectorModel& model, const std::vector<DetectionSample>& samples);

/// Runs the model over samples in chunks.
std::vector<Boxes> detect_all(DetectorModel& model, const std::vector<DetectionSample>& samples,
                              const ImageFn& protect_fn = {}, int chunk = 32);

struct DetectorFitOptions {
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  ImageFn transform;
  std::uint64_t seed = 0;
};

/// Adam training of a detector on its own loss; returns mean loss per epoch.
std::vector<double> fit_detector(DetectorModel& model, const std::vector<DetectionSample>& samples,
                                 const DetectorFitOptions& opts);

Tensor stack_images(const std::vector<DetectionSample>& samples, std::size_t begin, std::size_t end);

}  // namespace privisp::det
