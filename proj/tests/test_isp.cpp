#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "isp_oracles.hpp"
#include "privisp/error.hpp"
#include "privisp/isp.hpp"
#include "testing.hpp"

using namespace privisp;
using namespace privisp::isp;
using privisp::testing::central_difference;
using privisp::testing::random_tensor;

namespace {

ImageTensor pixel(double r, double g, double b, ColorDomain d = ColorDomain::srgb) {
  return ImageTensor(Tensor({1, 3, 1, 1}, {r, g, b}), d);
}

ImageTensor uniform_image(double v, ColorDomain d = ColorDomain::srgb) {
  return ImageTensor(Tensor({1, 3, 4, 5}, v), d);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("privisp_test_" + name);
}

}  // namespace

TEST_CASE("degamma") {
  auto out = degamma(pixel(0.0, 1.0, 0.5));
  CHECK(out.domain == ColorDomain::linear);
  CHECK(out.values[0] == 0.0);
  CHECK(out.values[1] == 1.0);
  // 0.5^2.2 evaluated independently.
  CHECK(out.values[2] == doctest::Approx(0.217637640824031).epsilon(1e-12));

  auto u = degamma(uniform_image(0.3));
  for (double v : u.values.values()) CHECK(v == doctest::Approx(std::pow(0.3, 2.2)));

  CHECK_THROWS_AS(degamma(pixel(0.1, 0.2, 0.3, ColorDomain::linear)), DomainError);
  CHECK_THROWS_AS(degamma(pixel(1.2, 0.2, 0.3)), ValidationError);
}

TEST_CASE("apply_ccm") {
  Rng rng(3);
  ImageTensor img(random_tensor({2, 3, 3, 4}, rng, 0.0, 1.0), ColorDomain::linear);
  CHECK(apply_ccm(img, ColorMatrix::identity()).values == img.values);

  auto doubled = apply_ccm(pixel(0.6, 0.2, 0.9, ColorDomain::linear), ColorMatrix::diagonal(2.0));
  CHECK(doubled.values[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(doubled.values[1] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(doubled.values[2] == doctest::Approx(1.0).epsilon(1e-12));

  auto black = apply_ccm(img, ColorMatrix{});
  for (double v : black.values.values()) CHECK(v == 0.0);

  ColorMatrix bad = ColorMatrix::identity();
  bad(1, 2) = std::nan("");
  CHECK_THROWS_AS(apply_ccm(img, bad), ValidationError);
}

TEST_CASE("apply_gamma") {
  Rng rng(4);
  ImageTensor img(random_tensor({1, 3, 5, 5}, rng, 0.0, 1.0), ColorDomain::linear);
  auto same = apply_gamma(img, GammaCurve::identity());
  for (std::size_t i = 0; i < img.values.numel(); ++i) CHECK(same.values[i] == doctest::Approx(img.values[i]).epsilon(1e-14));

  GammaCurve three({0.0, 0.5, 1.0}, {0.0, 0.8, 1.0});
  CHECK(three.evaluate(0.25) == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(three.evaluate(0.75) == doctest::Approx(0.9).epsilon(1e-14));

  auto inverted = GammaCurve::sampled([](double x) { return 1.0 - x; });
  CHECK(inverted.evaluate(0.3) == doctest::Approx(0.7).epsilon(1e-12));

  SUBCASE("exact at every knot") {
    std::vector<double> ys(32);
    for (double& y : ys) y = rng.uniform();
    auto curve = GammaCurve::from_outputs(ys);
    for (int i = 0; i < 32; ++i) CHECK(curve.evaluate(curve.inputs()[i]) == ys[i]);
  }
  SUBCASE("invalid grids are rejected") {
    CHECK_THROWS_AS(GammaCurve({0.0, 0.6, 0.5, 1.0}, {0, 0, 0, 0}), ValidationError);
    CHECK_THROWS_AS(GammaCurve({0.1, 1.0}, {0, 1}), ValidationError);
    CHECK_THROWS_AS(GammaCurve({0.0, 1.0}, {0, 1.5}), ValidationError);
  }
}

TEST_CASE("virtual_capture") {
  Rng rng(5);
  SUBCASE("sampled inverse power law reproduces the input within the dense-grid bound") {
    const double bound = privisp::testing::power_law_interpolation_bound(32);
    // Frozen from an independent numpy evaluation on a 2e6-point grid.
    CHECK(bound == doctest::Approx(0.0593628375600048).epsilon(1e-6));
    Tensor t({1, 3, 100, 100});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i % 10000) / 9999.0;
    ImageTensor img(t, ColorDomain::srgb);
    ISPParams p{ColorMatrix::identity(), GammaCurve::sampled([](double x) { return std::pow(x, 1.0 / 2.2); })};
    auto out = virtual_capture(img, p);
    double worst = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) worst = std::max(worst, std::abs(out.values[i] - t[i]));
    CHECK(worst <= bound + 1e-9);
  }
  SUBCASE("zero curve gives black") {
    ImageTensor img(random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0), ColorDomain::srgb);
    ISPParams p{ColorMatrix::identity(), GammaCurve::from_outputs(std::vector<double>(32, 0.0))};
    auto out = virtual_capture(img, p);
    for (double v : out.values.values()) CHECK(v == 0.0);
  }
  SUBCASE("inverting curve applies x -> 1 - x in the linear domain") {
    ImageTensor img(random_tensor({1, 3, 4, 4}, rng, 0.0, 1.0), ColorDomain::srgb);
    ISPParams p{ColorMatrix::identity(), GammaCurve::sampled([](double x) { return 1.0 - x; })};
    auto out = virtual_capture(img, p);
    for (std::size_t i = 0; i < out.values.numel(); ++i)
      CHECK(out.values[i] == doctest::Approx(1.0 - std::pow(img.values[i], 2.2)).epsilon(1e-12));
  }
  SUBCASE("fused kernel equals the staged serial reference") {
    ImageTensor img(random_tensor({3, 3, 7, 5}, rng, 0.0, 1.0), ColorDomain::srgb);
    ISPParams p = ISPParams::identity();
    for (double& a : p.ccm.m) a += rng.uniform(-0.4, 0.4);
    std::vector<double> ys(32);
    for (double& y : ys) y = rng.uniform();
    p.gamma = GammaCurve::from_outputs(ys);
    auto fast = virtual_capture(img, p);
    auto ref = reference::virtual_capture(img, p);
    for (std::size_t i = 0; i < fast.values.numel(); ++i) CHECK(fast.values[i] == doctest::Approx(ref.values[i]).epsilon(1e-12));
  }
  SUBCASE("output stays in [0,1] for extreme parameters") {
    ImageTensor img(random_tensor({2, 3, 6, 6}, rng, 0.0, 1.0), ColorDomain::srgb);
    ISPParams p = ISPParams::identity();
    for (double& a : p.ccm.m) a = rng.uniform(-5.0, 5.0);
    auto out = virtual_capture(img, p);
    for (double v : out.values.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("virtual_capture gradients match central differences") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    ISPParams p = ISPParams::identity();
    for (double& a : p.ccm.m) a += rng.uniform(-0.15, 0.15);
    std::vector<double> ys(32);
    for (int i = 0; i < 32; ++i) ys[i] = std::clamp(std::pow(i / 31.0, 0.5) + rng.uniform(-0.05, 0.05), 0.02, 0.98);
    p.gamma = GammaCurve::from_outputs(ys);
    Tensor x = random_tensor({1, 3, 3, 3}, rng, 0.05, 0.95);
    Tensor dir = random_tensor({1, 3, 3, 3}, rng);
    auto loss = [&](const ISPParams& q) {
      auto out = virtual_capture(ImageTensor(x, ColorDomain::srgb), q);
      double s = 0.0;
      for (std::size_t i = 0; i < out.values.numel(); ++i) s += out.values[i] * dir[i];
      return s;
    };
    auto g = virtual_capture_backward(ImageTensor(x, ColorDomain::srgb), p, dir, false);
    Tensor ccm({9}, std::vector<double>(p.ccm.m.begin(), p.ccm.m.end()));
    auto num_ccm = central_difference(ccm, [&] {
      ISPParams q = p;
      std::copy(ccm.storage().begin(), ccm.storage().end(), q.ccm.m.begin());
      return loss(q);
    }, 1e-4);
    for (int i = 0; i < 9; ++i) CHECK(privisp::testing::relative_error(num_ccm[i], g.d_ccm[i], 1e-8) < 1e-3);
    Tensor y({32}, ys);
    auto num_y = central_difference(y, [&] {
      ISPParams q = p;
      q.gamma = GammaCurve::from_outputs(y.storage());
      return loss(q);
    }, 1e-4);
    for (int i = 0; i < 32; ++i) CHECK(privisp::testing::relative_error(num_y[i], g.d_gamma[i], 1e-8) < 1e-3);
  }
}

TEST_CASE("compose_deployment") {
  Rng rng(7);
  ColorMatrix a, b;
  for (double& v : a.m) v = rng.uniform(-1, 1);
  for (double& v : b.m) v = rng.uniform(-1, 1);
  CHECK(compose_deployment(ColorMatrix::identity(), b) == b);
  CHECK(compose_deployment(a, ColorMatrix::identity()) == a);

  // Randomised equivalence on inputs where neither stage clips.
  int checked = 0;
  for (int trial = 0; trial < 2000 && checked < 200; ++trial) {
    ColorMatrix m1, m2;
    for (double& v : m1.m) v = rng.uniform(-0.5, 0.8);
    for (double& v : m2.m) v = rng.uniform(-0.5, 0.8);
    const double px[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    double mid[3], fin[3];
    bool clips = false;
    for (int r = 0; r < 3; ++r) {
      mid[r] = m1(r, 0) * px[0] + m1(r, 1) * px[1] + m1(r, 2) * px[2];
      clips |= mid[r] < 0 || mid[r] > 1;
    }
    for (int r = 0; r < 3; ++r) {
      fin[r] = m2(r, 0) * mid[0] + m2(r, 1) * mid[1] + m2(r, 2) * mid[2];
      clips |= fin[r] < 0 || fin[r] > 1;
    }
    if (clips) continue;
    ++checked;
    auto img = pixel(px[0], px[1], px[2], ColorDomain::linear);
    auto two_stage = apply_ccm(apply_ccm(img, m1), m2);
    auto one_stage = apply_ccm(img, compose_deployment(m1, m2));
    for (int c = 0; c < 3; ++c) CHECK(std::abs(two_stage.values[c] - one_stage.values[c]) < 1e-6);
  }
  CHECK(checked == 200);
}

TEST_CASE("dynamic CCM interpolation") {
  CalibratedCCMSet set{{{4000.0, ColorMatrix::identity()}, {6000.0, ColorMatrix::diagonal(2.0)}}};
  CHECK(interpolate_dynamic_ccm(set, 4000.0) == ColorMatrix::identity());
  CHECK(interpolate_dynamic_ccm(set, 6000.0) == ColorMatrix::diagonal(2.0));
  auto mid = interpolate_dynamic_ccm(set, 5000.0);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) CHECK(mid(r, c) == doctest::Approx(r == c ? 1.5 : 0.0).epsilon(1e-15));
  CHECK_THROWS_AS(interpolate_dynamic_ccm(set, 3000.0), RangeError);
  CHECK_THROWS_AS(interpolate_dynamic_ccm(set, 6500.0), RangeError);

  SUBCASE("interpolating deployed matrices equals deploying the interpolated matrix") {
    Rng rng(8);
    CalibratedCCMSet cal;
    for (double t : {2800.0, 4000.0, 5000.0, 6500.0}) {
      ColorMatrix m;
      for (double& v : m.m) v = rng.uniform(-1, 2);
      cal.entries.emplace_back(t, m);
    }
    ColorMatrix opt;
    for (double& v : opt.m) v = rng.uniform(-1, 1);
    auto deployed = deploy_dynamic_ccm(cal, opt);
    for (double te : {2800.0, 3100.0, 4500.0, 5999.0, 6500.0}) {
      auto a = interpolate_dynamic_ccm(deployed, te);
      auto b = compose_deployment(interpolate_dynamic_ccm(cal, te), opt);
      for (int i = 0; i < 9; ++i) CHECK(a.m[i] == doctest::Approx(b.m[i]).epsilon(1e-12));
    }
  }
  SUBCASE("calibration order is validated") {
    CalibratedCCMSet bad{{{5000.0, ColorMatrix::identity()}, {4000.0, ColorMatrix::identity()}}};
    CHECK_THROWS_AS(interpolate_dynamic_ccm(bad, 4500.0), ValidationError);
    CHECK_THROWS_AS(interpolate_dynamic_ccm(CalibratedCCMSet{}, 4500.0), ValidationError);
  }
}

TEST_CASE("parameter files") {
  Rng rng(9);
  ISPParams p = ISPParams::identity();
  for (double& a : p.ccm.m) a = rng.normal();
  std::vector<double> ys(32);
  for (double& y : ys) y = rng.uniform();
  p.gamma = GammaCurve::from_outputs(ys);

  const auto path = temp_file("params.json");
  export_params(p, path);
  CHECK(import_params(path) == p);

  std::string text = params_to_json(p);
  CHECK(text.find(kMatrixConvention) != std::string::npos);

  SUBCASE("out-of-range knot output") {
    auto j = nlohmann::json::parse(params_to_json(ISPParams::identity()));
    j["gamma_y"][31] = 1.5;
    CHECK_THROWS_AS(params_from_json(j.dump()), ValidationError);
  }
  SUBCASE("knot count mismatch names the field") {
    auto j = nlohmann::json::parse(params_to_json(ISPParams::identity()));
    j["gamma_y"].erase(31);
    try {
      params_from_json(j.dump());
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.location() == "gamma_y");
    }
  }
  SUBCASE("unknown fields are rejected") {
    auto j = nlohmann::json::parse(params_to_json(ISPParams::identity()));
    j["gain"] = 2.0;
    CHECK_THROWS_AS(params_from_json(j.dump()), ParseError);
  }
  SUBCASE("syntax errors report a byte offset") {
    try {
      params_from_json("{\"k\": 32, ");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.location().rfind("byte", 0) == 0);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("projection keeps gamma outputs feasible") {
  auto vars = ISPVariables::from(ISPParams::identity());
  vars.gamma_y.mutable_value()[3] = -0.2;
  vars.gamma_y.mutable_value()[5] = 1.7;
  vars.project();
  CHECK(vars.gamma_y.value()[3] == 0.0);
  CHECK(vars.gamma_y.value()[5] == 1.0);
  CHECK_NOTHROW(vars.to_params().validate());
}
