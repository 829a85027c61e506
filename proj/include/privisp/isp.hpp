#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "privisp/autograd.hpp"
#include "privisp/tensor.hpp"

namespace privisp::isp {

/// Exponent of the power-law prior used to undo an unknown camera gamma.
inline constexpr double kDegammaExponent = 2.2;
inline constexpr int kDefaultGammaKnots = 32;
/// Recorded in parameter files: pixels are column vectors, matrices act on the left.
inline constexpr const char* kMatrixConvention = "column-vector-left-multiply";

/// 3x3 colour correction matrix, row-major; row i produces output channel i.
struct ColorMatrix {
  std::array<double, 9> m{};

  static ColorMatrix identity();
  static ColorMatrix diagonal(double s);

  double operator()(int r, int c) const { return m[static_cast<std::size_t>(3 * r + c)]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(3 * r + c)]; }

  /// Throws ValidationError on non-finite entries.
  void validate() const;
  /// Matrix product this * rhs.
  ColorMatrix operator*(const ColorMatrix& rhs) const;
  ColorMatrix operator+(const ColorMatrix& rhs) const;
  ColorMatrix scaled(double s) const;
  bool operator==(const ColorMatrix&) const = default;
};

/// Piecewise-linear tone curve through knots (x_i, y_i), x fixed, y tunable.
class GammaCurve {
 public:
  /// Validates: >= 2 knots, x strictly increasing from 0 to 1, y in [0,1].
  GammaCurve(std::vector<double> knot_inputs, std::vector<double> knot_outputs);

  /// k evenly spaced inputs on [0,1], both endpoints included.
  static std::vector<double> uniform_grid(int k);
  static GammaCurve from_outputs(std::vector<double> knot_outputs);
  static GammaCurve identity(int k = kDefaultGammaKnots);
  /// Samples f at the uniform grid (outputs clamped to [0,1]).
  static GammaCurve sampled(const std::function<double(double)>& f, int k = kDefaultGammaKnots);

  int knots() const noexcept { return static_cast<int>(xs_.size()); }
  const std::vector<double>& inputs() const noexcept { return xs_; }
  const std::vector<double>& outputs() const noexcept { return ys_; }

  struct Segment {
    int index;      ///< left knot i, in [0, k-2]
    double weight;  ///< position inside the segment, in [0,1]
  };
  Segment locate(double x) const;
  /// (1 - w) y_i + w y_{i+1}; returns y_i exactly at knot x_i.
  double evaluate(double x) const;
  double slope(int segment) const;

  bool operator==(const GammaCurve&) const = default;

 private:
  std::vector<double> xs_;
  std::vector<double> ys_;
};

struct ISPParams {
  ColorMatrix ccm = ColorMatrix::identity();
  GammaCurve gamma = GammaCurve::identity();

  /// Unmodified camera: identity matrix and identity curve.
  static ISPParams identity(int knots = kDefaultGammaKnots);
  void validate() const;
  bool operator==(const ISPParams&) const = default;
};

enum class ColorDomain { srgb, linear };
const char* to_string(ColorDomain d);

/// Batch of RGB images [N,3,H,W] with values in [0,1].
struct ImageTensor {
  Tensor values;
  ColorDomain domain = ColorDomain::srgb;

  ImageTensor() = default;
  ImageTensor(Tensor v, ColorDomain d) : values(std::move(v)), domain(d) {}

  int batch() const { return values.dim(0); }
  int height() const { return values.dim(2); }
  int width() const { return values.dim(3); }
  /// Throws ValidationError unless shape is [N,3,H,W] and values are finite in [0,1].
  void validate() const;
};

struct CalibratedCCMSet {
  std::vector<std::pair<double, ColorMatrix>> entries;  ///< (kelvin, matrix), ascending
  void validate() const;
};

ImageTensor degamma(const ImageTensor& img);
ImageTensor apply_ccm(const ImageTensor& img, const ColorMatrix& ccm);
ImageTensor apply_gamma(const ImageTensor& img, const GammaCurve& curve);
/// gamma(ccm(degamma(img))) evaluated by a single fused parallel kernel.
ImageTensor virtual_capture(const ImageTensor& img, const ISPParams& params);

/// Single matrix equivalent to applying `ccm_orig` then `ccm_opt`, i.e. ccm_opt * ccm_orig.
ColorMatrix compose_deployment(const ColorMatrix& ccm_orig, const ColorMatrix& ccm_opt);
/// Linear interpolation between the two calibrated matrices bracketing `kelvin`.
ColorMatrix interpolate_dynamic_ccm(const CalibratedCCMSet& calibrated, double kelvin);
/// Replaces each calibrated matrix by compose_deployment(ccm_i, ccm_opt).
CalibratedCCMSet deploy_dynamic_ccm(const CalibratedCCMSet& calibrated, const ColorMatrix& ccm_opt);

std::string params_to_json(const ISPParams& params);
ISPParams params_from_json(const std::string& text);
void export_params(const ISPParams& params, const std::filesystem::path& destination);
ISPParams import_params(const std::filesystem::path& source);

struct CaptureGradients {
  std::array<double, 9> d_ccm{};
  std::vector<double> d_gamma;
  Tensor d_image;  ///< empty unless requested
};

/// Reverse-mode derivative of virtual_capture given dL/d(output).
CaptureGradients virtual_capture_backward(const ImageTensor& img, const ISPParams& params, const Tensor& upstream,
                                          bool want_image_grad);

namespace reference {
/// Serial composition of the three stages; kept to cross-check the fused kernel.
ImageTensor virtual_capture(const ImageTensor& img, const ISPParams& params);
}  // namespace reference

/// Trainable form of ISPParams: ccm as a [3,3] leaf, gamma outputs as a [k] leaf.
struct ISPVariables {
  ad::Var ccm;
  ad::Var gamma_y;
  std::vector<double> gamma_x;

  static ISPVariables from(const ISPParams& params);
  ISPParams to_params() const;
  /// Clamps every gamma output into [0,1].
  void project();
  std::vector<ad::Var> parameters() const { return {ccm, gamma_y}; }
};

/// Differentiable virtual capture of sRGB images [N,3,H,W].
ad::Var capture(const ad::Var& images, const ISPVariables& vars);

}  // namespace privisp::isp
