#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "privisp/detection.hpp"
#include "privisp/error.hpp"
#include "privisp/synthetic.hpp"
#include "testing.hpp"

using namespace privisp;
using namespace privisp::det;

namespace {

BoundingBox box(double x0, double y0, double x1, double y1, double conf = 1.0) {
  return BoundingBox::from_corners(x0, y0, x1, y1, conf);
}

// Returns preset boxes; the image index is read from pixel 0.
class FixedDetector : public DetectorModel {
 public:
  explicit FixedDetector(std::vector<Boxes> per_image) : boxes_(std::move(per_image)) {}
  std::vector<Boxes> detect(const Tensor& images) override {
    std::vector<Boxes> out;
    const std::size_t per = images.numel() / images.dim(0);
    for (int i = 0; i < images.dim(0); ++i) out.push_back(boxes_.at(static_cast<std::size_t>(std::lround(images[i * per]))));
    return out;
  }
  DetectionLoss loss(const ad::Var&, const std::vector<Boxes>&) override { throw Error("not differentiable"); }
  std::vector<ad::Var> parameters() const override { return {}; }

 private:
  std::vector<Boxes> boxes_;
};

std::vector<DetectionSample> indexed_samples(const std::vector<Boxes>& gt) {
  std::vector<DetectionSample> s;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    Tensor img({1, 3, 8, 8}, 0.0);
    img[0] = static_cast<double>(i);
    s.push_back({img, gt[i], {}, ""});
  }
  return s;
}

// Brute-force AP written without the library's matching code: every
// prediction is visited in global confidence order and claims the best
// still-free ground truth of its own image.
double brute_force_ap(const std::vector<Boxes>& pred, const std::vector<Boxes>& gt, double thr) {
  struct P {
    double conf;
    std::size_t img, k;
  };
  std::vector<P> all;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t k = 0; k < pred[i].size(); ++k) all.push_back({pred[i][k].confidence, i, k});
  std::stable_sort(all.begin(), all.end(), [](const P& a, const P& b) { return a.conf > b.conf; });
  std::size_t total = 0;
  for (const auto& g : gt) total += g.size();
  if (total == 0) return 0.0;
  std::map<std::pair<std::size_t, std::size_t>, bool> used;
  std::vector<double> prec, rec;
  double tp = 0, fp = 0;
  for (const auto& p : all) {
    const auto& a = pred[p.img][p.k];
    double best = -1;
    std::size_t bj = 0;
    for (std::size_t j = 0; j < gt[p.img].size(); ++j) {
      if (used[{p.img, j}]) continue;
      const auto& b = gt[p.img][j];
      const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
      const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
      const double inter = iw * ih;
      const double v = inter / (a.w * a.h + b.w * b.h - inter);
      if (v >= thr && v > best) best = v, bj = j;
    }
    if (best >= 0) {
      used[{p.img, bj}] = true;
      ++tp;
    } else {
      ++fp;
    }
    prec.push_back(tp / (tp + fp));
    rec.push_back(tp / static_cast<double>(total));
  }
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    double best = 0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= level - 1e-12) best = std::max(best, prec[i]);
    sum += best;
  }
  return sum / 101.0;
}

// Ten images with hand-placed ground truth and imperfect predictions.
void fixture(std::vector<Boxes>& pred, std::vector<Boxes>& gt) {
  gt = {{box(0.1, 0.1, 0.4, 0.5), box(0.6, 0.2, 0.9, 0.8)},
        {box(0.2, 0.2, 0.5, 0.9)},
        {},
        {box(0.0, 0.0, 0.3, 0.3), box(0.5, 0.5, 1.0, 1.0), box(0.3, 0.6, 0.45, 0.95)},
        {box(0.4, 0.1, 0.7, 0.6)},
        {box(0.1, 0.3, 0.35, 0.9)},
        {box(0.55, 0.05, 0.95, 0.5), box(0.05, 0.5, 0.4, 0.95)},
        {},
        {box(0.3, 0.3, 0.7, 0.7)},
        {box(0.0, 0.4, 0.2, 0.9)}};
  pred = {{box(0.12, 0.1, 0.41, 0.52, 0.95), box(0.62, 0.25, 0.88, 0.8, 0.7), box(0.1, 0.1, 0.4, 0.5, 0.3)},
          {box(0.25, 0.3, 0.55, 0.9, 0.85)},
          {box(0.4, 0.4, 0.6, 0.6, 0.6)},
          {box(0.0, 0.02, 0.28, 0.3, 0.91), box(0.55, 0.5, 1.0, 0.95, 0.45), box(0.7, 0.0, 0.9, 0.2, 0.2)},
          {box(0.45, 0.15, 0.75, 0.6, 0.77)},
          {},
          {box(0.55, 0.1, 0.9, 0.5, 0.66), box(0.1, 0.55, 0.45, 0.9, 0.52), box(0.05, 0.5, 0.4, 0.95, 0.12)},
          {box(0.1, 0.1, 0.2, 0.2, 0.33)},
          {box(0.32, 0.3, 0.72, 0.68, 0.99)},
          {box(0.0, 0.45, 0.22, 0.9, 0.58), box(0.6, 0.6, 0.8, 0.8, 0.4)}};
}

}  // namespace

TEST_CASE("iou") {
  const auto a = box(0.1, 0.2, 0.5, 0.6);
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(iou(a, box(0.6, 0.6, 0.9, 0.9)) == 0.0);
  CHECK(iou(box(0, 0, 1, 1), box(0.5, 0, 1.5, 1)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(box(0.5, 0.5, 0.5, 0.7).validate(), ValidationError);
  CHECK_THROWS_AS(box(1.2, 1.2, 1.5, 1.5).validate(), ValidationError);
}

TEST_CASE("nms keeps the most confident of overlapping boxes") {
  Boxes b{box(0.1, 0.1, 0.5, 0.5, 0.6), box(0.12, 0.1, 0.52, 0.5, 0.9), box(0.6, 0.6, 0.9, 0.9, 0.3)};
  const auto kept = nms(b, 0.5);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].confidence == 0.9);
  CHECK(kept[1].confidence == 0.3);
}

TEST_CASE("centre targets and loss") {
  const std::vector<Boxes> gt{{box(0.25, 0.25, 0.75, 0.75)}, {}};
  const auto t = center_targets(gt, 2, 8, 8);
  CHECK(t.objects == 1);
  CHECK(t.heatmap.at(0, 0, 4, 4) == 1.0);
  CHECK(t.positive.at(0, 0, 4, 4) == 1.0);
  for (double v : t.heatmap.values()) CHECK(v <= 1.0);

  SUBCASE("perfect regression gives zero box loss") {
    Tensor z({2, 5, 8, 8}, -8.0);
    for (int c = 0; c < 4; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) z.at(0, 1 + c, y, x) = t.regress.at(0, c, y, x);
    z.at(0, 0, 4, 4) = 8.0;
    const auto l = center_loss(ad::constant(z), t);
    CHECK(l.box.item() == 0.0);
    CHECK(l.cls.item() >= 0.0);
  }
  SUBCASE("empty ground truth") {
    const auto e = center_targets({{}}, 1, 4, 4);
    Rng rng(1);
    const auto l = center_loss(ad::constant(privisp::testing::random_tensor({1, 5, 4, 4}, rng)), e);
    CHECK(l.box.item() == 0.0);
    CHECK(l.cls.item() >= 0.0);
  }
}

TEST_CASE("detector loss gradient w.r.t. pixels matches finite differences") {
  Rng rng(3);
  CenterDetector model(rng, 4);
  Tensor img = privisp::testing::random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
  const std::vector<Boxes> gt{{box(0.2, 0.3, 0.6, 0.9)}};
  ad::Var x(img, true);
  const auto l = model.loss(x, gt);
  ad::backward(l.total());
  const Tensor grad = x.grad();
  auto f = [&] { return model.loss(ad::constant(img), gt).total().item(); };
  int checked = 0;
  for (int t = 0; t < 12; ++t) {
    const std::size_t i = static_cast<std::size_t>(rng.integer(0, static_cast<int>(img.numel()) - 1));
    const double keep = img[i];
    img[i] = keep + 1e-5;
    const double up = f();
    img[i] = keep - 1e-5;
    const double down = f();
    img[i] = keep;
    const double fd = (up - down) / 2e-5;
    CHECK(privisp::testing::relative_error(fd, grad[i], 1e-6) < 1e-3);
    ++checked;
  }
  CHECK(checked == 12);
}

TEST_CASE("evaluation metrics") {
  std::vector<Boxes> gt{{box(0.1, 0.1, 0.4, 0.4), box(0.5, 0.5, 0.9, 0.9)}, {box(0.2, 0.2, 0.6, 0.8)}};
  SUBCASE("perfect predictions") {
    const auto m = evaluate_predictions(gt, gt);
    CHECK(m.ap == doctest::Approx(1.0));
    CHECK(m.ap50 == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(1.0));
  }
  SUBCASE("no predictions") {
    const auto m = evaluate_predictions({{}, {}}, gt);
    CHECK(m.ap == 0.0);
    CHECK(m.recall == 0.0);
  }
  SUBCASE("through a model") {
    FixedDetector d(gt);
    CHECK(evaluate_detection(d, indexed_samples(gt)).ap == doctest::Approx(1.0));
    CHECK_THROWS_AS(evaluate_detection(d, {}), ProtocolError);
  }
}

TEST_CASE("AP matches a brute-force oracle on a ten-image fixture") {
  std::vector<Boxes> pred, gt;
  fixture(pred, gt);
  for (double t = 0.5; t < 0.96; t += 0.05) CHECK(average_precision(pred, gt, t) == brute_force_ap(pred, gt, t));
  double mean = 0;
  for (int k = 0; k < 10; ++k) mean += brute_force_ap(pred, gt, 0.5 + 0.05 * k);
  CHECK(evaluate_predictions(pred, gt).ap == doctest::Approx(mean / 10).epsilon(1e-12));
}

TEST_CASE("AP properties") {
  std::vector<Boxes> pred, gt;
  fixture(pred, gt);
  const double base = average_precision(pred, gt, 0.5);

  SUBCASE("deleting true positives never raises AP") {
    std::vector<Boxes> hits(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i)
      for (std::size_t k = 0; k < gt[i].size(); ++k) {
        auto b = gt[i][k];
        b.confidence = 0.1 + 0.05 * static_cast<double>(i + 3 * k);
        hits[i].push_back(b);
      }
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      auto p = hits;
      double prev = average_precision(p, gt, 0.5);
      for (;;) {
        std::vector<std::pair<std::size_t, std::size_t>> slots;
        for (std::size_t i = 0; i < p.size(); ++i)
          for (std::size_t k = 0; k < p[i].size(); ++k) slots.emplace_back(i, k);
        if (slots.empty()) break;
        const auto [i, k] = slots[static_cast<std::size_t>(rng.integer(0, static_cast<int>(slots.size()) - 1))];
        p[i].erase(p[i].begin() + static_cast<long>(k));
        const double ap = average_precision(p, gt, 0.5);
        CHECK(ap <= prev + 1e-12);
        prev = ap;
      }
      CHECK(prev == 0.0);
    }
  }
  SUBCASE("dropping the least confident predictions never raises AP") {
    std::vector<double> confs;
    for (const auto& b : pred)
      for (const auto& x : b) confs.push_back(x.confidence);
    std::sort(confs.begin(), confs.end());
    double prev = base;
    for (double c : confs) {
      auto p = pred;
      for (auto& b : p) std::erase_if(b, [c](const BoundingBox& x) { return x.confidence <= c; });
      const double ap = average_precision(p, gt, 0.5);
      CHECK(ap <= prev + 1e-12);
      prev = ap;
    }
  }
  SUBCASE("invariant to prediction order") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      auto p = pred;
      for (auto& b : p) rng.shuffle(b);
      CHECK(evaluate_predictions(p, gt).ap == evaluate_predictions(pred, gt).ap);
    }
  }
  SUBCASE("no ground truth") { CHECK(average_precision(pred, std::vector<Boxes>(10), 0.5) == 0.0); }
}

TEST_CASE("pseudo ground truth") {
  std::vector<Boxes> out{{box(0.1, 0.1, 0.4, 0.4, 0.9), box(0.5, 0.5, 0.9, 0.9, 0.5), box(0.6, 0.1, 0.9, 0.3, 0.2)},
                         {box(0.2, 0.2, 0.6, 0.8, 0.51)},
                         {box(0.2, 0.2, 0.6, 0.8, 0.3)}};
  FixedDetector d(out);
  const auto samples = indexed_samples({{box(0, 0, 1, 1)}, {}, {}});
  const auto pseudo = pseudo_ground_truth(d, samples);
  REQUIRE(pseudo.size() == 3);
  CHECK(pseudo[0].boxes.size() == 1);  // 0.5 exactly is excluded
  CHECK(pseudo[1].boxes.size() == 1);
  CHECK(pseudo[2].boxes.empty());
  CHECK(evaluate_detection(d, pseudo).ap == doctest::Approx(1.0));

  FixedDetector quiet({{box(0.1, 0.1, 0.4, 0.4, 0.4)}});
  CHECK(pseudo_ground_truth(quiet, indexed_samples({{}}))[0].boxes.empty());
}

TEST_CASE("centre detector learns synthetic scenes") {
  const auto scenes = synth::scene_corpus({.scenes = 24, .seed = 4});
  Rng rng(2);
  CenterDetector model(rng, 6);
  const auto losses = fit_detector(model, scenes, {.epochs = 6, .batch_size = 8, .lr = 3e-3});
  REQUIRE(losses.size() == 6);
  CHECK(losses.back() < losses.front());
  const auto boxes = model.detect(stack_images(scenes, 0, 2));
  CHECK(boxes.size() == 2);
  for (const auto& b : boxes)
    for (const auto& x : b) {
      CHECK(x.confidence >= 0.0);
      CHECK(x.confidence <= 1.0);
    }
}
