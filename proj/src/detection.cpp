#include "privisp/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "privisp/error.hpp"
#include "privisp/ops.hpp"
#include "privisp/optim.hpp"

namespace privisp::det {

using ad::Node;
using ad::Var;

// ---------------------------------------------------------------- boxes

BoundingBox BoundingBox::from_corners(double x0, double y0, double x1, double y1, double confidence) {
  return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, confidence, 0};
}

void BoundingBox::validate() const {
  if (!(std::isfinite(cx) && std::isfinite(cy) && w > 0 && h > 0))
    throw ValidationError("box needs finite centre and positive size");
  if (x1() <= 0 || y1() <= 0 || x0() >= 1 || y0() >= 1) throw ValidationError("box lies outside the image");
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

Boxes nms(Boxes boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(),
                   [](const BoundingBox& a, const BoundingBox& b) { return a.confidence > b.confidence; });
  Boxes kept;
  for (const auto& b : boxes) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(b, k) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

Var DetectionLoss::total() const { return ad::add(cls, box); }

// ---------------------------------------------------------------- centre targets and loss

CenterTargets center_targets(const std::vector<Boxes>& ground_truth, int batch, int gh, int gw) {
  if (static_cast<int>(ground_truth.size()) != batch) throw ValidationError("one box list per image required");
  CenterTargets t;
  t.heatmap = Tensor({batch, 1, gh, gw});
  t.regress = Tensor({batch, 4, gh, gw});
  t.positive = Tensor({batch, 1, gh, gw});
  for (int n = 0; n < batch; ++n) {
    for (const auto& b : ground_truth[n]) {
      const double gx = b.cx * gw, gy = b.cy * gh;
      const int ix = std::clamp(static_cast<int>(std::floor(gx)), 0, gw - 1);
      const int iy = std::clamp(static_cast<int>(std::floor(gy)), 0, gh - 1);
      const double sx = 0.5 + b.w * gw / 6.0, sy = 0.5 + b.h * gh / 6.0;
      for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) {
          const double dx = x - ix, dy = y - iy;
          const double v = std::exp(-(dx * dx) / (2 * sx * sx) - (dy * dy) / (2 * sy * sy));
          double& cell = t.heatmap.at(n, 0, y, x);
          cell = std::max(cell, v);
        }
      if (t.positive.at(n, 0, iy, ix) == 0.0) ++t.objects;
      t.positive.at(n, 0, iy, ix) = 1.0;
      t.regress.at(n, 0, iy, ix) = gx - ix;
      t.regress.at(n, 1, iy, ix) = gy - iy;
      t.regress.at(n, 2, iy, ix) = b.w * gw;
      t.regress.at(n, 3, iy, ix) = b.h * gh;
    }
  }
  return t;
}

namespace {

// log(1 + e^x) without overflow
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Var focal_heatmap_loss(const Var& out, const CenterTargets& t) {
  const Tensor& z = out.value();
  const int n = z.dim(0), gh = z.dim(2), gw = z.dim(3);
  const double norm = std::max(1, t.objects);
  double loss = 0.0;
  Tensor dz(z.shape());
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) {
        const double zi = z.at(b, 0, y, x);
        const double p = 1.0 / (1.0 + std::exp(-zi));
        const double log_p = -softplus(-zi), log_q = -softplus(zi);
        if (t.positive.at(b, 0, y, x) != 0.0) {
          loss -= (1 - p) * (1 - p) * log_p;
          dz.at(b, 0, y, x) = (1 - p) * (1 - p) * (2 * p * log_p - (1 - p)) / norm;
        } else {
          const double w4 = std::pow(1.0 - t.heatmap.at(b, 0, y, x), 4);
          loss -= w4 * p * p * log_q;
          dz.at(b, 0, y, x) = w4 * p * p * (p - 2 * (1 - p) * log_q) / norm;
        }
      }
  return ad::make_result(Tensor({1}, {loss / norm}), {out}, [dz](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += up * dz[i];
  });
}

Var box_l1_loss(const Var& out, const CenterTargets& t, double size_weight) {
  const Tensor& z = out.value();
  const int n = z.dim(0), gh = z.dim(2), gw = z.dim(3);
  const double norm = std::max(1, t.objects);
  double loss = 0.0;
  Tensor dz(z.shape());
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) {
        if (t.positive.at(b, 0, y, x) == 0.0) continue;
        for (int c = 0; c < 4; ++c) {
          const double wgt = c < 2 ? 1.0 : size_weight;
          const double d = z.at(b, 1 + c, y, x) - t.regress.at(b, c, y, x);
          loss += wgt * std::abs(d);
          dz.at(b, 1 + c, y, x) = wgt * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / norm;
        }
      }
  return ad::make_result(Tensor({1}, {loss / norm}), {out}, [dz](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    Tensor& g = a.ensure_grad();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += up * dz[i];
  });
}

}  // namespace

DetectionLoss center_loss(const Var& head_output, const CenterTargets& targets, double size_weight) {
  const auto& s = head_output.shape();
  if (s.size() != 4 || s[1] != 5 || !targets.heatmap.same_shape(Tensor({s[0], 1, s[2], s[3]})))
    throw ValidationError("center_loss: output/target shape mismatch");
  return {focal_heatmap_loss(head_output, targets), box_l1_loss(head_output, targets, size_weight)};
}

std::vector<Boxes> decode_center_output(const Tensor& z, double min_confidence, double nms_iou, int max_detections) {
  const int n = z.dim(0), gh = z.dim(2), gw = z.dim(3);
  std::vector<Boxes> out(static_cast<std::size_t>(n));
  for (int b = 0; b < n; ++b) {
    Boxes cand;
    auto prob = [&](int y, int x) { return 1.0 / (1.0 + std::exp(-z.at(b, 0, y, x))); };
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) {
        const double p = prob(y, x);
        if (p < min_confidence) continue;
        bool peak = true;
        for (int dy = -1; dy <= 1 && peak; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if ((dy || dx) && yy >= 0 && yy < gh && xx >= 0 && xx < gw && prob(yy, xx) > p) {
              peak = false;
              break;
            }
          }
        if (!peak) continue;
        BoundingBox box;
        box.cx = (x + z.at(b, 1, y, x)) / gw;
        box.cy = (y + z.at(b, 2, y, x)) / gh;
        box.w = std::max(z.at(b, 3, y, x), 1e-3) / gw;
        box.h = std::max(z.at(b, 4, y, x), 1e-3) / gh;
        box.confidence = p;
        cand.push_back(box);
      }
    cand = nms(std::move(cand), nms_iou);
    if (static_cast<int>(cand.size()) > max_detections) cand.resize(static_cast<std::size_t>(max_detections));
    out[b] = std::move(cand);
  }
  return out;
}

// ---------------------------------------------------------------- detector

CenterDetector::CenterDetector(Rng& rng, int width) : width_(width) {
  c1_ = nn::Conv2d(3, width, 3, 2, 1, rng);
  c2_ = nn::Conv2d(width, 2 * width, 3, 2, 1, rng);
  c3_ = nn::Conv2d(2 * width, 2 * width, 3, 2, 1, rng);
  c4_ = nn::Conv2d(2 * width, 2 * width, 3, 1, 1, rng);
  head_ = nn::Conv2d(2 * width, 5, 1, 1, 0, rng);
  // Start the heatmap near a 0.1 prior so early focal gradients stay small.
  head_.bias.mutable_value()[0] = -2.19;
  for (double& v : head_.weight.mutable_value().values()) v *= 0.1;
}

Var CenterDetector::forward(const Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] % kStride || s[3] % kStride)
    throw ValidationError("detector input must be [N,3,H,W] with H, W multiples of 8");
  constexpr double slope = 0.1;
  Var h = ad::add_scalar(images, -0.5);
  h = ad::leaky_relu(c1_(h), slope);
  h = ad::leaky_relu(c2_(h), slope);
  h = ad::leaky_relu(c3_(h), slope);
  h = ad::leaky_relu(c4_(h), slope);
  return head_(h);
}

std::vector<Boxes> CenterDetector::detect(const Tensor& images) {
  return decode_center_output(forward(ad::constant(images)).value());
}

DetectionLoss CenterDetector::loss(const Var& images, const std::vector<Boxes>& ground_truth) {
  Var out = forward(images);
  const auto targets = center_targets(ground_truth, out.shape()[0], out.shape()[2], out.shape()[3]);
  return center_loss(out, targets);
}

std::vector<Var> CenterDetector::parameters() const {
  std::vector<Var> p;
  for (const auto* layer : {&c1_, &c2_, &c3_, &c4_, &head_})
    for (const Var& v : layer->parameters()) p.push_back(v);
  return p;
}

CenterDetector CenterDetector::clone() const {
  CenterDetector copy = *this;
  auto fresh = nn::clone_parameters(parameters());
  std::size_t i = 0;
  for (nn::Conv2d* layer : {&copy.c1_, &copy.c2_, &copy.c3_, &copy.c4_, &copy.head_}) {
    layer->weight = fresh[i++];
    layer->bias = fresh[i++];
  }
  return copy;
}

// ---------------------------------------------------------------- metrics

namespace {

struct Scored {
  double confidence;
  bool tp;
  std::size_t image, order;
};

// Per-image greedy matching in descending confidence; each prediction takes the
// unmatched ground truth with the highest IoU at or above the threshold.
std::vector<Scored> match_all(const std::vector<Boxes>& preds, const std::vector<Boxes>& gts, double thr,
                              double min_confidence) {
  std::vector<Scored> out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::vector<std::size_t> order(preds[i].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return preds[i][a].confidence > preds[i][b].confidence;
    });
    std::vector<bool> used(gts[i].size(), false);
    for (std::size_t k : order) {
      const auto& p = preds[i][k];
      if (p.confidence < min_confidence) continue;
      double best = thr;
      int hit = -1;
      for (std::size_t g = 0; g < gts[i].size(); ++g) {
        if (used[g]) continue;
        const double v = iou(p, gts[i][g]);
        if (v >= best) {
          best = v;
          hit = static_cast<int>(g);
        }
      }
      if (hit >= 0) used[static_cast<std::size_t>(hit)] = true;
      out.push_back({p.confidence, hit >= 0, i, k});
    }
  }
  return out;
}

std::size_t count_gt(const std::vector<Boxes>& gts) {
  std::size_t n = 0;
  for (const auto& g : gts) n += g.size();
  return n;
}

void check_pairs(const std::vector<Boxes>& preds, const std::vector<Boxes>& gts) {
  if (preds.size() != gts.size()) throw ValidationError("predictions and ground truth cover different images");
}

}  // namespace

double average_precision(const std::vector<Boxes>& preds, const std::vector<Boxes>& gts, double thr) {
  check_pairs(preds, gts);
  const std::size_t total = count_gt(gts);
  if (total == 0) return 0.0;
  auto scored = match_all(preds, gts, thr, -1.0);
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.image != b.image) return a.image < b.image;
    return a.order < b.order;
  });
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (const auto& s : scored) {
    (s.tp ? tp : fp) += 1;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(total));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

DetectionMetrics evaluate_predictions(const std::vector<Boxes>& preds, const std::vector<Boxes>& gts,
                                      const OperatingPoint& op) {
  check_pairs(preds, gts);
  DetectionMetrics m;
  double acc = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double thr = 0.5 + 0.05 * k;
    const double ap = average_precision(preds, gts, thr);
    acc += ap;
    if (k == 0) m.ap50 = ap;
    if (k == 5) m.ap75 = ap;
  }
  m.ap = acc / 10.0;
  const auto scored = match_all(preds, gts, op.iou, op.min_confidence);
  double tp = 0;
  for (const auto& s : scored) tp += s.tp;
  const double total = static_cast<double>(count_gt(gts));
  m.precision = scored.empty() ? 0.0 : tp / static_cast<double>(scored.size());
  m.recall = total > 0 ? tp / total : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

Tensor stack_images(const std::vector<DetectionSample>& samples, std::size_t begin, std::size_t end) {
  std::vector<Tensor> parts;
  for (std::size_t i = begin; i < end; ++i) parts.push_back(samples[i].image);
  return Tensor::stack(parts);
}

std::vector<Boxes> detect_all(DetectorModel& model, const std::vector<DetectionSample>& samples,
                              const ImageFn& protect_fn, int chunk) {
  std::vector<Boxes> out;
  for (std::size_t b = 0; b < samples.size(); b += static_cast<std::size_t>(chunk)) {
    Tensor x = stack_images(samples, b, std::min(samples.size(), b + static_cast<std::size_t>(chunk)));
    if (protect_fn) x = protect_fn(x);
    for (auto& boxes : model.detect(x)) out.push_back(std::move(boxes));
  }
  return out;
}

DetectionMetrics evaluate_detection(DetectorModel& model, const std::vector<DetectionSample>& samples,
                                    const ImageFn& protect_fn, const OperatingPoint& op) {
  if (samples.empty()) throw ProtocolError("evaluate_detection: no samples");
  std::vector<Boxes> gts;
  for (const auto& s : samples) gts.push_back(s.boxes);
  return evaluate_predictions(detect_all(model, samples, protect_fn), gts, op);
}

std::vector<DetectionSample> pseudo_ground_truth(DetectorModel& model, const std::vector<DetectionSample>& samples) {
  const auto preds = detect_all(model, samples);
  std::vector<DetectionSample> out = samples;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].boxes.clear();
    for (const auto& b : preds[i])
      if (b.confidence > 0.5) out[i].boxes.push_back(b);
  }
  return out;
}

std::vector<double> fit_detector(DetectorModel& model, const std::vector<DetectionSample>& samples,
                                 const DetectorFitOptions& opts) {
  auto params = model.parameters();
  nn::set_requires_grad(params, true);
  optim::Adam opt(params, opts.lr, opts.weight_decay, true);
  Rng rng(opts.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  for (int e = 0; e < opts.epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(opts.batch_size));
      std::vector<Tensor> imgs;
      std::vector<Boxes> gts;
      for (std::size_t i = b; i < end; ++i) {
        imgs.push_back(samples[order[i]].image);
        gts.push_back(samples[order[i]].boxes);
      }
      Tensor x = Tensor::stack(imgs);
      if (opts.transform) x = opts.transform(x);
      opt.zero_grad();
      Var loss = model.loss(ad::constant(std::move(x)), gts).total();
      if (!std::isfinite(loss.item())) throw DivergenceError("detector loss became non-finite");
      ad::backward(loss);
      opt.step();
      total += loss.item();
      ++batches;
    }
    history.push_back(total / std::max(1, batches));
  }
  return history;
}

}  // namespace privisp::det
