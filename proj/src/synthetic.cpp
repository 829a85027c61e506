#include "privisp/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace privisp::synth {

namespace {

constexpr double kPi = std::numbers::pi;

void put(Tensor& img, int c, int y, int x, double v) { img.at(0, c, y, x) = v; }

// Low-contrast blobs and bars behind the subject.
void paint_clutter(Tensor& img, Rng& rng, int count, double lo, double hi) {
  const int h = img.dim(2), w = img.dim(3);
  for (int k = 0; k < count; ++k) {
    const double col[3] = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
    const int x0 = rng.integer(-w / 4, w - 1), y0 = rng.integer(-h / 4, h - 1);
    const int x1 = x0 + rng.integer(w / 8, w / 2), y1 = y0 + rng.integer(h / 8, h / 2);
    const bool round = rng.uniform() < 0.5;
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1), rx = 0.5 * (x1 - x0), ry = 0.5 * (y1 - y0);
    for (int y = std::max(0, y0); y < std::min(h, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(w, x1); ++x) {
        if (round && std::pow((x - cx) / rx, 2) + std::pow((y - cy) / ry, 2) > 1.0) continue;
        for (int c = 0; c < 3; ++c) put(img, c, y, x, col[c]);
      }
  }
}

// Skin oval with the identity texture, two eyes and a mouth. Coordinates in pixels.
void paint_head(Tensor& img, const IdentitySignature& id, Rng& rng, double cx, double cy, double rx, double ry) {
  const int h = img.dim(2), w = img.dim(3);
  const double brightness = rng.uniform(0.96, 1.04);
  const double phase = rng.uniform(0.0, 2 * kPi);
  const double k = 2 * kPi * id.frequency / (2 * rx);
  const double ca = std::cos(id.angle), sa = std::sin(id.angle);
  for (int y = std::max(0, static_cast<int>(cy - ry - 1)); y < std::min(h, static_cast<int>(cy + ry + 2)); ++y)
    for (int x = std::max(0, static_cast<int>(cx - rx - 1)); x < std::min(w, static_cast<int>(cx + rx + 2)); ++x) {
      const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
      if (u * u + v * v > 1.0) continue;
      const double tex = id.amplitude * std::sin(k * ((x - cx) * ca + (y - cy) * sa) + phase);
      for (int c = 0; c < 3; ++c) put(img, c, y, x, std::clamp(id.skin[c] * brightness + tex, 0.0, 1.0));
    }
  // Features shared by all identities.
  const double er = std::max(0.6, 0.15 * rx);
  for (double side : {-1.0, 1.0}) {
    const double ex = cx + side * 0.4 * rx, ey = cy - 0.25 * ry;
    for (int y = std::max(0, static_cast<int>(ey - er - 1)); y < std::min(h, static_cast<int>(ey + er + 2)); ++y)
      for (int x = std::max(0, static_cast<int>(ex - er - 1)); x < std::min(w, static_cast<int>(ex + er + 2)); ++x)
        if (std::hypot(x + 0.5 - ex, y + 0.5 - ey) <= er)
          for (int c = 0; c < 3; ++c) put(img, c, y, x, 0.08);
  }
  const int my = static_cast<int>(cy + 0.45 * ry);
  if (my >= 0 && my < h)
    for (int x = static_cast<int>(cx - 0.3 * rx); x <= static_cast<int>(cx + 0.3 * rx); ++x)
      if (x >= 0 && x < w) {
        put(img, 0, my, x, 0.45);
        put(img, 1, my, x, 0.18);
        put(img, 2, my, x, 0.18);
      }
}

void add_noise(Tensor& img, Rng& rng, double sigma) {
  for (double& v : img.values()) v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
}

}  // namespace

IdentitySignature make_identity(Rng& rng) {
  IdentitySignature id;
  const double base[3] = {0.80, 0.62, 0.52};
  for (int c = 0; c < 3; ++c) id.skin[c] = base[c] + rng.uniform(-0.1, 0.1);
  id.angle = rng.uniform(0.0, kPi);
  id.frequency = rng.uniform(1.5, 4.5);
  id.amplitude = rng.uniform(0.06, 0.1);
  return id;
}

IdentitySignature identity_signature(std::uint64_t corpus_seed, int identity) {
  Rng rng(derive_seed(corpus_seed ^ 0x1D5EEDULL, static_cast<std::uint64_t>(identity)));
  return make_identity(rng);
}

Tensor render_face(const IdentitySignature& id, Rng& rng, int size) {
  Tensor img({1, 3, size, size});
  const double bg[3] = {rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45)};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) put(img, c, y, x, bg[c]);
  paint_clutter(img, rng, 3, 0.05, 0.45);
  const double s = size / 32.0;
  paint_head(img, id, rng, size / 2.0 + rng.uniform(-1.5, 1.5) * s, size / 2.0 + rng.uniform(-1.5, 1.5) * s,
             rng.uniform(10.0, 11.0) * s, rng.uniform(12.5, 13.5) * s);
  add_noise(img, rng, 0.015);
  return img;
}

face::FaceDataset face_corpus(const FaceCorpusSpec& spec) {
  face::FaceDataset data;
  for (int i = 0; i < spec.identities; ++i) {
    const int label = spec.first_identity + i;
    const auto id = identity_signature(spec.seed, label);
    Rng rng(derive_seed(spec.seed, 1000003ULL * static_cast<std::uint64_t>(label + 1)));
    for (int j = 0; j < spec.images_per_identity; ++j)
      data.samples.push_back(
          {render_face(id, rng, spec.size), label, "synthetic:" + std::to_string(label) + "/" + std::to_string(j)});
  }
  return data;
}

std::vector<det::DetectionSample> scene_corpus(const SceneCorpusSpec& spec) {
  std::vector<det::DetectionSample> out;
  Rng rng(spec.seed);
  const int n = spec.size;
  const double s = n / 64.0;
  for (int k = 0; k < spec.scenes; ++k) {
    det::DetectionSample sample;
    sample.source = "synthetic-scene:" + std::to_string(k);
    Tensor img({1, 3, n, n});
    const double bg[3] = {rng.uniform(0.15, 0.55), rng.uniform(0.15, 0.55), rng.uniform(0.15, 0.55)};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) put(img, c, y, x, bg[c]);
    paint_clutter(img, rng, 6, 0.1, 0.6);

    // Persons occupy disjoint horizontal slots.
    const int persons = rng.integer(1, spec.max_persons);
    const double slot = static_cast<double>(n) / persons;
    for (int p = 0; p < persons; ++p) {
      const double bw = rng.uniform(9.0, 14.0) * s;
      const double bh = rng.uniform(16.0, 26.0) * s;
      const double rx = 0.42 * bw, ry = 1.2 * rx;
      const double total_h = bh + 2 * ry;
      const double cx = p * slot + rng.uniform(bw / 2 + 1, std::max(bw / 2 + 1.5, slot - bw / 2 - 1));
      const double top = rng.uniform(1.0, n - total_h - 1.0);
      const double col[3] = {rng.uniform(0.03, 0.45), rng.uniform(0.03, 0.45), rng.uniform(0.03, 0.45)};
      const double body_top = top + 2 * ry - 1.0;
      for (int y = std::max(0, static_cast<int>(body_top)); y < std::min(n, static_cast<int>(top + total_h)); ++y)
        for (int x = std::max(0, static_cast<int>(cx - bw / 2)); x < std::min(n, static_cast<int>(cx + bw / 2)); ++x)
          for (int c = 0; c < 3; ++c) put(img, c, y, x, col[c]);
      const int head_id = rng.integer(0, spec.head_identities - 1);
      paint_head(img, identity_signature(spec.seed, 100000 + head_id), rng, cx, top + ry, rx, ry);

      const double x0 = std::max(0.0, std::floor(cx - bw / 2)), x1 = std::min<double>(n, std::ceil(cx + bw / 2));
      const double y0 = std::max(0.0, std::floor(top)), y1 = std::min<double>(n, std::ceil(top + total_h));
      sample.boxes.push_back(det::BoundingBox::from_corners(x0 / n, y0 / n, x1 / n, y1 / n));
      sample.faces.push_back(det::BoundingBox::from_corners(std::max(0.0, std::floor(cx - rx)) / n,
                                                            std::max(0.0, std::floor(top)) / n,
                                                            std::min<double>(n, std::ceil(cx + rx)) / n,
                                                            std::min<double>(n, std::ceil(top + 2 * ry)) / n));
    }
    add_noise(img, rng, 0.015);
    sample.image = std::move(img);
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace privisp::synth
