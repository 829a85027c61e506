#include "privisp/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "privisp/error.hpp"

namespace privisp::eval {

namespace {

void require_images(const Tensor& t, const char* who) {
  if (t.rank() != 4 || t.dim(1) < 1) throw ValidationError(std::string(who) + ": expected [N,C,H,W], got " + t.shape_string());
}

void require_same(const Tensor& a, const Tensor& b, const char* who) {
  require_images(a, who);
  if (!a.same_shape(b)) throw ValidationError(std::string(who) + ": shape mismatch " + a.shape_string() + " vs " +
                                              b.shape_string());
}

// One channel plane as a dense row-major buffer.
struct Plane {
  int h, w;
  std::vector<double> v;
  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane plane_of(const Tensor& t, int n, int c) {
  Plane p{t.dim(2), t.dim(3), {}};
  const std::size_t sz = static_cast<std::size_t>(p.h) * p.w;
  const double* src = t.ptr() + (static_cast<std::size_t>(n) * t.dim(1) + c) * sz;
  p.v.assign(src, src + sz);
  return p;
}

// Valid-mode separable filtering with taps g (odd length).
Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  Plane tmp{p.h, p.w - k + 1, {}};
  tmp.v.assign(static_cast<std::size_t>(tmp.h) * tmp.w, 0.0);
  for (int y = 0; y < tmp.h; ++y)
    for (int x = 0; x < tmp.w; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += g[i] * p.at(y, x + i);
      tmp.at(y, x) = s;
    }
  Plane out{p.h - k + 1, tmp.w, {}};
  out.v.assign(static_cast<std::size_t>(out.h) * out.w, 0.0);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double s = 0;
      for (int i = 0; i < k; ++i) s += g[i] * tmp.at(y + i, x);
      out.at(y, x) = s;
    }
  return out;
}

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Mean SSIM and mean contrast-structure term of one plane pair.
std::pair<double, double> ssim_plane(const Plane& a, const Plane& b) {
  int win = std::min({11, a.h, a.w});
  if (win % 2 == 0) --win;
  const auto g = gaussian_kernel(win, 1.5);
  Plane aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  const Plane ma = filter_valid(a, g), mb = filter_valid(b, g);
  const Plane saa = filter_valid(aa, g), sbb = filter_valid(bb, g), sab = filter_valid(ab, g);
  double s = 0, cs = 0;
  for (std::size_t i = 0; i < ma.v.size(); ++i) {
    const double mx = ma.v[i], my = mb.v[i];
    const double vx = saa.v[i] - mx * mx, vy = sbb.v[i] - my * my, cxy = sab.v[i] - mx * my;
    const double c = (2 * cxy + kC2) / (vx + vy + kC2);
    cs += c;
    s += (2 * mx * my + kC1) / (mx * mx + my * my + kC1) * c;
  }
  const double n = static_cast<double>(ma.v.size());
  return {s / n, cs / n};
}

Plane half(const Plane& p) {
  if (p.h < 2 || p.w < 2) return p;
  Plane out{p.h / 2, p.w / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.at(y, x) = 0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y + 1, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x + 1));
  return out;
}

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

}  // namespace

// ---------------------------------------------------------------- IQA

double psnr_from_mse(double mse) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& test, const Tensor& ref) {
  require_same(test, ref, "ssim");
  double total = 0;
  for (int n = 0; n < test.dim(0); ++n)
    for (int c = 0; c < test.dim(1); ++c) total += ssim_plane(plane_of(test, n, c), plane_of(ref, n, c)).first;
  return total / (test.dim(0) * test.dim(1));
}

double ms_ssim(const Tensor& test, const Tensor& ref) {
  require_same(test, ref, "ms_ssim");
  static constexpr std::array<double, 5> weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double total = 0;
  for (int n = 0; n < test.dim(0); ++n)
    for (int c = 0; c < test.dim(1); ++c) {
      Plane a = plane_of(test, n, c), b = plane_of(ref, n, c);
      double value = 1.0;
      for (std::size_t j = 0; j < weights.size(); ++j) {
        const auto [s, cs] = ssim_plane(a, b);
        const double term = j + 1 == weights.size() ? s : cs;
        value *= std::pow(std::max(term, 0.0), weights[j]);
        a = half(a);
        b = half(b);
      }
      total += value;
    }
  return total / (test.dim(0) * test.dim(1));
}

IQAReport iqa(const Tensor& test, const Tensor& ref) {
  require_same(test, ref, "iqa");
  double se = 0;
  for (std::size_t i = 0; i < test.numel(); ++i) se += (test[i] - ref[i]) * (test[i] - ref[i]);
  const double mse = se / static_cast<double>(test.numel());
  IQAReport r;
  r.rmse = std::sqrt(mse);
  r.psnr = psnr_from_mse(mse);
  r.ssim = ssim(test, ref);
  r.ms_ssim = ms_ssim(test, ref);
  return r;
}

double masked_psnr(const Tensor& test, const Tensor& ref, const Tensor& mask) {
  require_same(test, ref, "masked_psnr");
  const int n = test.dim(0), c = test.dim(1), h = test.dim(2), w = test.dim(3);
  if (mask.numel() != static_cast<std::size_t>(n) * h * w) throw ValidationError("masked_psnr: mask must be [N,1,H,W]");
  double se = 0, count = 0;
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (mask.at(b, 0, y, x) == 0.0) continue;
        for (int k = 0; k < c; ++k) {
          const double d = test.at(b, k, y, x) - ref.at(b, k, y, x);
          se += d * d;
          count += 1;
        }
      }
  if (count == 0) throw ValidationError("masked_psnr: empty mask");
  return psnr_from_mse(se / count);
}

// ---------------------------------------------------------------- baselines

Tensor low_resolution(const Tensor& img, int factor) {
  require_images(img, "low_resolution");
  if (factor < 1) throw ValidationError("low_resolution: factor must be >= 1");
  if (factor == 1) return img;
  const int n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  const int hs = (h + factor - 1) / factor, ws = (w + factor - 1) / factor;
  Tensor out(img.shape());
  std::vector<double> small(static_cast<std::size_t>(hs) * ws);
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      // Area average; edge blocks average only the pixels that exist.
      for (int sy = 0; sy < hs; ++sy)
        for (int sx = 0; sx < ws; ++sx) {
          double s = 0;
          int cnt = 0;
          for (int y = sy * factor; y < std::min(h, (sy + 1) * factor); ++y)
            for (int x = sx * factor; x < std::min(w, (sx + 1) * factor); ++x, ++cnt) s += img.at(b, k, y, x);
          small[static_cast<std::size_t>(sy) * ws + sx] = s / cnt;
        }
      for (int y = 0; y < h; ++y) {
        const double fy = std::clamp((y + 0.5) / factor - 0.5, 0.0, hs - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, hs - 1);
        const double wy = fy - y0;
        for (int x = 0; x < w; ++x) {
          const double fx = std::clamp((x + 0.5) / factor - 0.5, 0.0, ws - 1.0);
          const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, ws - 1);
          const double wx = fx - x0;
          auto s = [&](int yy, int xx) { return small[static_cast<std::size_t>(yy) * ws + xx]; };
          out.at(b, k, y, x) = (1 - wy) * ((1 - wx) * s(y0, x0) + wx * s(y0, x1)) + wy * ((1 - wx) * s(y1, x0) + wx * s(y1, x1));
        }
      }
    }
  return out;
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw ValidationError("gaussian kernel size must be a positive odd integer");
  if (!(sigma > 0)) throw ValidationError("gaussian sigma must be > 0");
  std::vector<double> g(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0;
  for (int i = 0; i < size; ++i) s += (g[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma)));
  for (double& v : g) v /= s;
  return g;
}

Tensor defocus(const Tensor& img, int kernel_size, double sigma) {
  require_images(img, "defocus");
  const auto g = gaussian_kernel(kernel_size, sigma);
  if (kernel_size == 1) return img;
  const int n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3), r = kernel_size / 2;
  Tensor tmp(img.shape()), out(img.shape());
  for (int b = 0; b < n; ++b)
    for (int k = 0; k < c; ++k) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double s = 0;
          for (int i = -r; i <= r; ++i) s += g[i + r] * img.at(b, k, y, reflect101(x + i, w));
          tmp.at(b, k, y, x) = s;
        }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double s = 0;
          for (int i = -r; i <= r; ++i) s += g[i + r] * tmp.at(b, k, reflect101(y + i, h), x);
          out.at(b, k, y, x) = s;
        }
    }
  return out;
}

Tensor invert_colors(const Tensor& img) {
  Tensor out = img;
  for (double& v : out.values()) v = 1.0 - v;
  return out;
}

InversionReport preliminary_inversion_analysis(const Tensor& faces, face::FeatureExtractor& extractor,
                                               det::DetectorModel& detector,
                                               const std::vector<det::DetectionSample>& scenes, double threshold) {
  InversionReport r;
  const Tensor fa = face::extract_batched(extractor, faces);
  const Tensor fb = face::extract_batched(extractor, invert_colors(faces));
  const int d = fa.dim(1);
  r.pairs = fa.dim(0);
  int above = 0;
  for (int i = 0; i < r.pairs; ++i) {
    std::span<const double> a(fa.ptr() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d));
    std::span<const double> b(fb.ptr() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d));
    const double s = face::cosine_similarity(a, b);
    r.mean_similarity += s;
    above += s > threshold;
  }
  if (r.pairs > 0) {
    r.mean_similarity /= r.pairs;
    r.same_identity_rate = static_cast<double>(above) / r.pairs;
  }
  if (!scenes.empty()) {
    const auto raw = det::detect_all(detector, scenes);
    const auto inv = det::detect_all(detector, scenes, invert_colors);
    int missed = 0;
    for (std::size_t i = 0; i < raw.size(); ++i)
      for (const auto& a : raw[i]) {
        if (a.confidence <= 0.5) continue;
        ++r.raw_detections;
        bool found = false;
        for (const auto& b : inv[i]) found = found || (b.confidence > 0.5 && det::iou(a, b) >= 0.5);
        missed += !found;
      }
    r.miss_rate = r.raw_detections > 0 ? static_cast<double>(missed) / r.raw_detections : 0.0;
  }
  return r;
}

// ---------------------------------------------------------------- sweep

bool dominates(const SweepPoint& a, const SweepPoint& b) {
  return a.privacy <= b.privacy && a.utility >= b.utility && (a.privacy < b.privacy || a.utility > b.utility);
}

void mark_dominated(std::vector<SweepPoint>& points) {
  for (auto& p : points) {
    p.dominated = false;
    for (const auto& q : points)
      if (&q != &p && dominates(q, p)) p.dominated = true;
  }
}

std::vector<SweepPoint> tradeoff_sweep(const std::vector<SweepConfig>& configs, const SweepContext& ctx) {
  if (!ctx.faces || !ctx.extractor || !ctx.detector || !ctx.scenes) throw ProtocolError("tradeoff_sweep: incomplete context");
  std::vector<SweepPoint> points;
  for (const auto& cfg : configs) {
    face::ProtocolOptions opts;
    opts.protect_fn = cfg.transform;
    opts.runs = ctx.runs;
    opts.seed = ctx.seed;
    SweepPoint p{cfg.method, cfg.parameter, 0, 0, false};
    p.privacy = face::closed_set_protocol(*ctx.faces, *ctx.extractor, opts).mean_accuracy;
    p.utility = det::evaluate_detection(*ctx.detector, *ctx.scenes, cfg.transform).ap;
    points.push_back(p);
  }
  mark_dominated(points);
  return points;
}

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "method,parameter,privacy_accuracy,utility_ap,pareto_dominated\n";
  for (const auto& p : points)
    out << p.method << ',' << p.parameter << ',' << p.privacy << ',' << p.utility << ',' << (p.dominated ? 1 : 0) << '\n';
}

void write_sweep_svg(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  constexpr int W = 480, H = 360, L = 60, R = 20, T = 20, B = 50;
  auto px = [&](double acc) { return L + acc * (W - L - R); };
  auto py = [&](double ap) { return H - B - ap * (H - T - B); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::vector<std::string> methods;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    out << "<text x=\"" << px(v) << "\" y=\"" << H - B + 16 << "\" font-size=\"11\" text-anchor=\"middle\">" << v << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << v << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
      << "\" font-size=\"12\" text-anchor=\"middle\">face identification accuracy (lower is more private)</text>\n";
  out << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (T + H - B) / 2 << ")\">detection AP</text>\n";
  for (const auto& p : points) {
    auto it = std::find(methods.begin(), methods.end(), p.method);
    if (it == methods.end()) it = methods.insert(methods.end(), p.method);
    const char* color = palette[static_cast<std::size_t>(it - methods.begin()) % 6];
    out << "<circle cx=\"" << px(std::clamp(p.privacy, 0.0, 1.0)) << "\" cy=\"" << py(std::clamp(p.utility, 0.0, 1.0))
        << "\" r=\"4\" fill=\"" << (p.dominated ? "none" : color) << "\" stroke=\"" << color << "\"><title>" << p.method
        << ' ' << p.parameter << "</title></circle>\n";
  }
  for (std::size_t i = 0; i < methods.size(); ++i)
    out << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (i + 1) << "\" font-size=\"11\" text-anchor=\"end\" fill=\""
        << palette[i % 6] << "\">" << methods[i] << "</text>\n";
  out << "</svg>\n";
}

// ---------------------------------------------------------------- features

void export_features(face::FeatureExtractor& extractor, const face::FaceDataset& data,
                     const std::filesystem::path& destination) {
  const Tensor f = face::extract_batched(extractor, data.all_images());
  std::ofstream out(destination);
  if (!out) throw Error("cannot write " + destination.string());
  out.precision(17);
  const int d = f.dim(1);
  out << "image_id,identity";
  for (int j = 0; j < d; ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    out << (s.source.empty() ? std::to_string(i) : s.source) << ',' << s.identity;
    for (int j = 0; j < d; ++j) out << ',' << f.at(static_cast<int>(i), j);
    out << '\n';
  }
}

FeatureTable read_features(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) throw Error("cannot read " + source.string());
  FeatureTable t;
  std::string line;
  std::getline(in, line);
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    t.ids.push_back(cell);
    std::getline(ss, cell, ',');
    try {
      t.identities.push_back(std::stoi(cell));
      std::vector<double> f;
      while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
      t.features.push_back(std::move(f));
    } catch (const std::exception&) {
      throw ParseError("line " + std::to_string(row), "malformed feature row");
    }
  }
  return t;
}

}  // namespace privisp::eval
