#include "privisp/isp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "privisp/error.hpp"

namespace privisp::isp {

using json = nlohmann::json;

// ---------------------------------------------------------------- ColorMatrix

ColorMatrix ColorMatrix::identity() { return diagonal(1.0); }

ColorMatrix ColorMatrix::diagonal(double s) {
  ColorMatrix c;
  c(0, 0) = c(1, 1) = c(2, 2) = s;
  return c;
}

void ColorMatrix::validate() const {
  for (double v : m)
    if (!std::isfinite(v)) throw ValidationError("colour matrix has a non-finite entry");
}

ColorMatrix ColorMatrix::operator*(const ColorMatrix& rhs) const {
  ColorMatrix out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += (*this)(r, k) * rhs(k, c);
      out(r, c) = s;
    }
  return out;
}

ColorMatrix ColorMatrix::operator+(const ColorMatrix& rhs) const {
  ColorMatrix out;
  for (std::size_t i = 0; i < 9; ++i) out.m[i] = m[i] + rhs.m[i];
  return out;
}

ColorMatrix ColorMatrix::scaled(double s) const {
  ColorMatrix out;
  for (std::size_t i = 0; i < 9; ++i) out.m[i] = s * m[i];
  return out;
}

// ----------------------------------------------------------------- GammaCurve

GammaCurve::GammaCurve(std::vector<double> knot_inputs, std::vector<double> knot_outputs)
    : xs_(std::move(knot_inputs)), ys_(std::move(knot_outputs)) {
  if (xs_.size() < 2) throw ValidationError("gamma curve needs at least 2 knots");
  if (xs_.size() != ys_.size())
    throw ValidationError("gamma curve has " + std::to_string(xs_.size()) + " inputs but " +
                          std::to_string(ys_.size()) + " outputs");
  if (xs_.front() != 0.0 || xs_.back() != 1.0) throw ValidationError("gamma knot inputs must start at 0 and end at 1");
  for (std::size_t i = 1; i < xs_.size(); ++i)
    if (!(xs_[i] > xs_[i - 1])) throw ValidationError("gamma knot inputs must be strictly increasing");
  for (std::size_t i = 0; i < ys_.size(); ++i)
    if (!(ys_[i] >= 0.0 && ys_[i] <= 1.0))
      throw ValidationError("gamma knot output y[" + std::to_string(i) + "] = " + std::to_string(ys_[i]) +
                            " outside [0,1]");
}

std::vector<double> GammaCurve::uniform_grid(int k) {
  if (k < 2) throw ValidationError("gamma curve needs at least 2 knots");
  std::vector<double> xs(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) xs[i] = static_cast<double>(i) / static_cast<double>(k - 1);
  xs.back() = 1.0;
  return xs;
}

GammaCurve GammaCurve::from_outputs(std::vector<double> knot_outputs) {
  auto xs = uniform_grid(static_cast<int>(knot_outputs.size()));
  return GammaCurve(std::move(xs), std::move(knot_outputs));
}

GammaCurve GammaCurve::identity(int k) { return from_outputs(uniform_grid(k)); }

GammaCurve GammaCurve::sampled(const std::function<double(double)>& f, int k) {
  auto xs = uniform_grid(k);
  std::vector<double> ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = std::clamp(f(xs[i]), 0.0, 1.0);
  return GammaCurve(std::move(xs), std::move(ys));
}

GammaCurve::Segment GammaCurve::locate(double x) const {
  const int last = knots() - 2;
  int i = static_cast<int>(std::upper_bound(xs_.begin(), xs_.end(), x) - xs_.begin()) - 1;
  i = std::clamp(i, 0, last);
  const double w = std::clamp((x - xs_[i]) / (xs_[i + 1] - xs_[i]), 0.0, 1.0);
  return {i, w};
}

double GammaCurve::evaluate(double x) const {
  const Segment s = locate(x);
  return (1.0 - s.weight) * ys_[s.index] + s.weight * ys_[s.index + 1];
}

double GammaCurve::slope(int segment) const {
  return (ys_[segment + 1] - ys_[segment]) / (xs_[segment + 1] - xs_[segment]);
}

// ------------------------------------------------------------------ ISPParams

ISPParams ISPParams::identity(int knots) { return {ColorMatrix::identity(), GammaCurve::identity(knots)}; }

void ISPParams::validate() const {
  ccm.validate();
  // GammaCurve validates on construction; re-run to catch in-place edits.
  GammaCurve(gamma.inputs(), gamma.outputs());
}

const char* to_string(ColorDomain d) { return d == ColorDomain::srgb ? "srgb" : "linear"; }

void ImageTensor::validate() const {
  if (values.rank() != 4 || values.dim(1) != 3)
    throw ValidationError("image tensor must be [N,3,H,W], got " + values.shape_string());
  for (double v : values.values())
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("image value outside [0,1]");
}

void CalibratedCCMSet::validate() const {
  if (entries.empty()) throw ValidationError("calibrated CCM set is empty");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].second.validate();
    if (!std::isfinite(entries[i].first)) throw ValidationError("non-finite colour temperature");
    if (i > 0 && !(entries[i].first > entries[i - 1].first))
      throw ValidationError("calibrated colour temperatures must be strictly ascending");
  }
}

// ----------------------------------------------------------------- image ops

namespace {

void require_domain(const ImageTensor& img, ColorDomain want, const char* op) {
  if (img.domain != want)
    throw DomainError(std::string(op) + " expects a " + to_string(want) + " image, got " + to_string(img.domain));
}

}  // namespace

ImageTensor degamma(const ImageTensor& img) {
  require_domain(img, ColorDomain::srgb, "degamma");
  img.validate();
  ImageTensor out(Tensor(img.values.shape()), ColorDomain::linear);
  const double* in = img.values.ptr();
  double* o = out.values.ptr();
  const std::size_t n = img.values.numel();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) o[i] = std::pow(in[i], kDegammaExponent);
  return out;
}

ImageTensor apply_ccm(const ImageTensor& img, const ColorMatrix& ccm) {
  ccm.validate();
  img.validate();
  ImageTensor out(Tensor(img.values.shape()), img.domain);
  const int N = img.batch();
  const std::size_t plane = static_cast<std::size_t>(img.height()) * img.width();
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double* px = img.values.ptr() + static_cast<std::size_t>(n) * 3 * plane + p;
      double* po = out.values.ptr() + static_cast<std::size_t>(n) * 3 * plane + p;
      for (int r = 0; r < 3; ++r) {
        const double v = ccm(r, 0) * px[0] + ccm(r, 1) * px[plane] + ccm(r, 2) * px[2 * plane];
        po[r * plane] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

ImageTensor apply_gamma(const ImageTensor& img, const GammaCurve& curve) {
  img.validate();
  ImageTensor out(Tensor(img.values.shape()), ColorDomain::srgb);
  const double* in = img.values.ptr();
  double* o = out.values.ptr();
  const std::size_t n = img.values.numel();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) o[i] = curve.evaluate(in[i]);
  return out;
}

ImageTensor virtual_capture(const ImageTensor& img, const ISPParams& params) {
  require_domain(img, ColorDomain::srgb, "virtual_capture");
  img.validate();
  params.ccm.validate();
  const ColorMatrix& a = params.ccm;
  const GammaCurve& curve = params.gamma;
  ImageTensor out(Tensor(img.values.shape()), ColorDomain::srgb);
  const int N = img.batch();
  const std::size_t plane = static_cast<std::size_t>(img.height()) * img.width();
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double* px = img.values.ptr() + static_cast<std::size_t>(n) * 3 * plane + p;
      double* po = out.values.ptr() + static_cast<std::size_t>(n) * 3 * plane + p;
      const double lin[3] = {std::pow(px[0], kDegammaExponent), std::pow(px[plane], kDegammaExponent),
                             std::pow(px[2 * plane], kDegammaExponent)};
      for (int r = 0; r < 3; ++r) {
        const double v = a(r, 0) * lin[0] + a(r, 1) * lin[1] + a(r, 2) * lin[2];
        po[r * plane] = curve.evaluate(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

namespace reference {

ImageTensor virtual_capture(const ImageTensor& img, const ISPParams& params) {
  return apply_gamma(apply_ccm(degamma(img), params.ccm), params.gamma);
}

}  // namespace reference

CaptureGradients virtual_capture_backward(const ImageTensor& img, const ISPParams& params, const Tensor& upstream,
                                          bool want_image_grad) {
  require_domain(img, ColorDomain::srgb, "virtual_capture_backward");
  if (!upstream.same_shape(img.values)) throw ValidationError("upstream gradient shape mismatch");
  const ColorMatrix& a = params.ccm;
  const GammaCurve& curve = params.gamma;
  const int N = img.batch();
  const int k = curve.knots();
  const std::size_t plane = static_cast<std::size_t>(img.height()) * img.width();

  CaptureGradients out;
  out.d_gamma.assign(static_cast<std::size_t>(k), 0.0);
  if (want_image_grad) out.d_image = Tensor(img.values.shape());

  // Per-image partial sums, reduced serially so the result is independent of threading.
  const std::size_t width = 9 + static_cast<std::size_t>(k);
  std::vector<double> partial(static_cast<std::size_t>(N) * width, 0.0);

#pragma omp parallel for schedule(static)
  for (int n = 0; n < N; ++n) {
    double* acc = partial.data() + static_cast<std::size_t>(n) * width;
    const double* base = img.values.ptr() + static_cast<std::size_t>(n) * 3 * plane;
    const double* gbase = upstream.ptr() + static_cast<std::size_t>(n) * 3 * plane;
    double* dbase = want_image_grad ? out.d_image.ptr() + static_cast<std::size_t>(n) * 3 * plane : nullptr;
    for (std::size_t p = 0; p < plane; ++p) {
      const double x[3] = {base[p], base[plane + p], base[2 * plane + p]};
      const double lin[3] = {std::pow(x[0], kDegammaExponent), std::pow(x[1], kDegammaExponent),
                             std::pow(x[2], kDegammaExponent)};
      double dv[3];
      for (int r = 0; r < 3; ++r) {
        const double v = a(r, 0) * lin[0] + a(r, 1) * lin[1] + a(r, 2) * lin[2];
        const double cv = std::clamp(v, 0.0, 1.0);
        const auto seg = curve.locate(cv);
        const double g = gbase[r * plane + p];
        acc[9 + seg.index] += g * (1.0 - seg.weight);
        acc[9 + seg.index + 1] += g * seg.weight;
        const double inside = (v >= 0.0 && v <= 1.0) ? 1.0 : 0.0;
        dv[r] = g * curve.slope(seg.index) * inside;
        for (int c = 0; c < 3; ++c) acc[3 * r + c] += dv[r] * lin[c];
      }
      if (dbase) {
        for (int c = 0; c < 3; ++c) {
          const double dlin = a(0, c) * dv[0] + a(1, c) * dv[1] + a(2, c) * dv[2];
          dbase[c * plane + p] += dlin * kDegammaExponent * std::pow(x[c], kDegammaExponent - 1.0);
        }
      }
    }
  }
  for (int n = 0; n < N; ++n) {
    const double* acc = partial.data() + static_cast<std::size_t>(n) * width;
    for (std::size_t i = 0; i < 9; ++i) out.d_ccm[i] += acc[i];
    for (int i = 0; i < k; ++i) out.d_gamma[i] += acc[9 + i];
  }
  return out;
}

// ------------------------------------------------------------ deployment math

ColorMatrix compose_deployment(const ColorMatrix& ccm_orig, const ColorMatrix& ccm_opt) {
  ccm_orig.validate();
  ccm_opt.validate();
  return ccm_opt * ccm_orig;
}

ColorMatrix interpolate_dynamic_ccm(const CalibratedCCMSet& calibrated, double kelvin) {
  calibrated.validate();
  const auto& e = calibrated.entries;
  if (!(kelvin >= e.front().first && kelvin <= e.back().first))
    throw RangeError("colour temperature " + std::to_string(kelvin) + "K outside calibrated range [" +
                     std::to_string(e.front().first) + ", " + std::to_string(e.back().first) + "]");
  for (const auto& [t, ccm] : e)
    if (t == kelvin) return ccm;
  std::size_t i = 0;
  while (e[i + 1].first < kelvin) ++i;
  const double t0 = e[i].first, t1 = e[i + 1].first;
  return e[i + 1].second.scaled((kelvin - t0) / (t1 - t0)) + e[i].second.scaled((t1 - kelvin) / (t1 - t0));
}

CalibratedCCMSet deploy_dynamic_ccm(const CalibratedCCMSet& calibrated, const ColorMatrix& ccm_opt) {
  calibrated.validate();
  CalibratedCCMSet out = calibrated;
  for (auto& [t, ccm] : out.entries) ccm = compose_deployment(ccm, ccm_opt);
  return out;
}

// ------------------------------------------------------------ serialisation

std::string params_to_json(const ISPParams& params) {
  json j;
  j["convention"] = kMatrixConvention;
  j["k"] = params.gamma.knots();
  j["ccm"] = params.ccm.m;
  j["gamma_x"] = params.gamma.inputs();
  j["gamma_y"] = params.gamma.outputs();
  return j.dump(2) + "\n";
}

namespace {

std::vector<double> number_array(const json& j, const char* key, std::size_t expected) {
  if (!j.contains(key)) throw ParseError(key, "missing field");
  const json& a = j.at(key);
  if (!a.is_array()) throw ParseError(key, "expected an array");
  if (a.size() != expected)
    throw ParseError(key, "expected " + std::to_string(expected) + " numbers, got " + std::to_string(a.size()));
  std::vector<double> out;
  out.reserve(expected);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].is_number()) throw ParseError(std::string(key) + "[" + std::to_string(i) + "]", "expected a number");
    out.push_back(a[i].get<double>());
  }
  return out;
}

}  // namespace

ISPParams params_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("byte " + std::to_string(e.byte), e.what());
  }
  if (!j.is_object()) throw ParseError("<root>", "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "convention" && key != "k" && key != "ccm" && key != "gamma_x" && key != "gamma_y")
      throw ParseError(key, "unknown field");
  }
  if (j.contains("convention") && j["convention"] != kMatrixConvention)
    throw ParseError("convention", "unsupported matrix convention");
  if (!j.contains("k") || !j["k"].is_number_integer()) throw ParseError("k", "missing or non-integer knot count");
  const int k = j["k"].get<int>();
  if (k < 2) throw ParseError("k", "knot count must be at least 2");
  ISPParams p;
  auto ccm = number_array(j, "ccm", 9);
  std::copy(ccm.begin(), ccm.end(), p.ccm.m.begin());
  p.ccm.validate();
  auto xs = number_array(j, "gamma_x", static_cast<std::size_t>(k));
  auto ys = number_array(j, "gamma_y", static_cast<std::size_t>(k));
  p.gamma = GammaCurve(std::move(xs), std::move(ys));
  return p;
}

void export_params(const ISPParams& params, const std::filesystem::path& destination) {
  params.validate();
  std::ofstream out(destination);
  if (!out) throw Error("cannot write " + destination.string());
  out << params_to_json(params);
}

ISPParams import_params(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) throw Error("cannot read " + source.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return params_from_json(ss.str());
}

// ------------------------------------------------------------------- autodiff

ISPVariables ISPVariables::from(const ISPParams& params) {
  ISPVariables v;
  v.ccm = ad::Var(Tensor({3, 3}, std::vector<double>(params.ccm.m.begin(), params.ccm.m.end())), true);
  v.gamma_y = ad::Var(Tensor({params.gamma.knots()}, params.gamma.outputs()), true);
  v.gamma_x = params.gamma.inputs();
  return v;
}

ISPParams ISPVariables::to_params() const {
  ISPParams p;
  std::copy(ccm.value().storage().begin(), ccm.value().storage().end(), p.ccm.m.begin());
  p.gamma = GammaCurve(gamma_x, gamma_y.value().storage());
  return p;
}

void ISPVariables::project() {
  for (double& y : gamma_y.mutable_value().values()) y = std::clamp(y, 0.0, 1.0);
}

ad::Var capture(const ad::Var& images, const ISPVariables& vars) {
  const ISPParams params = vars.to_params();
  const ImageTensor img(images.value(), ColorDomain::srgb);
  ImageTensor out = virtual_capture(img, params);
  return ad::make_result(std::move(out.values), {images, vars.ccm, vars.gamma_y}, [params](ad::Node& self) {
    ad::Node& x = *self.inputs[0];
    ad::Node& ccm = *self.inputs[1];
    ad::Node& gy = *self.inputs[2];
    const ImageTensor in_img(x.value, ColorDomain::srgb);
    auto grads = virtual_capture_backward(in_img, params, self.grad, x.requires_grad);
    if (x.requires_grad) x.ensure_grad().accumulate(grads.d_image);
    if (ccm.requires_grad) {
      Tensor& g = ccm.ensure_grad();
      for (std::size_t i = 0; i < 9; ++i) g[i] += grads.d_ccm[i];
    }
    if (gy.requires_grad) {
      Tensor& g = gy.ensure_grad();
      for (std::size_t i = 0; i < grads.d_gamma.size(); ++i) g[i] += grads.d_gamma[i];
    }
  });
}

}  // namespace privisp::isp
