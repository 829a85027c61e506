#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "privisp/error.hpp"
#include "privisp/evaluation.hpp"
#include "privisp/synthetic.hpp"
#include "testing.hpp"

using namespace privisp;
namespace fs = std::filesystem;

namespace {

double variance(const Tensor& t) {
  double m = 0;
  for (double v : t.values()) m += v;
  m /= static_cast<double>(t.numel());
  double s = 0;
  for (double v : t.values()) s += (v - m) * (v - m);
  return s / static_cast<double>(t.numel());
}

fs::path temp_dir(const char* tag) {
  auto d = fs::temp_directory_path() / (std::string("privisp_eval_") + tag + "_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

eval::SweepPoint point(const char* label, double acc, double ap) { return {label, "", acc, ap, false}; }

}  // namespace

TEST_CASE("image quality metrics") {
  SUBCASE("uniform 0.5 vs 0.25") {
    const auto r = eval::iqa(Tensor({1, 3, 16, 16}, 0.5), Tensor({1, 3, 16, 16}, 0.25));
    CHECK(r.rmse == doctest::Approx(0.25).epsilon(1e-12));
    // 10 log10(1 / 0.0625)
    CHECK(r.psnr == doctest::Approx(12.041199826559248).epsilon(1e-12));
  }
  SUBCASE("identical images") {
    Rng rng(1);
    const Tensor a = privisp::testing::random_tensor({2, 3, 24, 24}, rng, 0, 1);
    const auto r = eval::iqa(a, a);
    CHECK(r.rmse == 0.0);
    CHECK(r.psnr == eval::kPsnrCap);
    CHECK(r.ssim == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.ms_ssim == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("PSNR is -20 log10 RMSE") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
      const Tensor a = privisp::testing::random_tensor({1, 3, 12, 12}, rng, 0, 1);
      const Tensor b = privisp::testing::random_tensor({1, 3, 12, 12}, rng, 0, 1);
      const auto r = eval::iqa(a, b);
      CHECK(r.psnr == doctest::Approx(-20 * std::log10(r.rmse)).epsilon(1e-12));
      CHECK(r.ssim <= 1.0);
      CHECK(r.ssim >= -1.0);
      CHECK(r.ms_ssim <= 1.0);
    }
  }
  SUBCASE("masked PSNR ignores mask-0 pixels") {
    Tensor a({1, 3, 2, 2}, 0.5), b({1, 3, 2, 2}, 0.5);
    for (int c = 0; c < 3; ++c) b[c * 4] = 0.0;
    const Tensor mask({1, 1, 2, 2}, {0, 1, 1, 1});
    CHECK(eval::masked_psnr(a, b, mask) == eval::kPsnrCap);
    CHECK(eval::masked_psnr(a, b, Tensor({1, 1, 2, 2}, 1.0)) < 20.0);
  }
  CHECK_THROWS_AS(eval::iqa(Tensor({1, 3, 4, 4}), Tensor({1, 3, 4, 5})), ValidationError);
}

TEST_CASE("low resolution baseline") {
  const Tensor row({1, 1, 1, 4}, {0, 1, 0, 1});
  const Tensor low = eval::low_resolution(row, 2);
  for (double v : low.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  Rng rng(3);
  const Tensor img = privisp::testing::random_tensor({1, 3, 9, 13}, rng, 0, 1);
  CHECK(eval::low_resolution(img, 1) == img);
  for (int f : {2, 3, 4, 16}) {
    const Tensor flat = eval::low_resolution(Tensor({1, 3, 9, 13}, 0.3), f);
    for (double v : flat.values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
  }
  CHECK(eval::low_resolution(img, 4).shape() == img.shape());
  CHECK_THROWS_AS(eval::low_resolution(img, 0), ValidationError);
}

TEST_CASE("defocus baseline") {
  Tensor impulse({1, 1, 5, 5});
  impulse.at(0, 0, 2, 2) = 1.0;
  const Tensor out = eval::defocus(impulse, 3, 1.0);
  // Outer product of the normalised taps (e^-1/2, 1, e^-1/2).
  const double table[3][3] = {{0.07511360795411152, 0.12384140315297398, 0.07511360795411152},
                              {0.12384140315297398, 0.2041799555716581, 0.12384140315297398},
                              {0.07511360795411152, 0.12384140315297398, 0.07511360795411152}};
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      const bool inside = y >= 1 && y <= 3 && x >= 1 && x <= 3;
      CHECK(out.at(0, 0, y, x) == doctest::Approx(inside ? table[y - 1][x - 1] : 0.0).epsilon(1e-12));
    }
  Rng rng(4);
  const Tensor img = privisp::testing::random_tensor({1, 3, 7, 6}, rng, 0, 1);
  CHECK(eval::defocus(img, 1, 2.0) == img);
  const Tensor flat = eval::defocus(Tensor({1, 3, 7, 6}, 0.7), 9, 3.0);
  for (double v : flat.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
  CHECK_THROWS_AS(eval::defocus(img, 4, 1.0), ValidationError);
  CHECK_THROWS_AS(eval::defocus(img, 3, 0.0), ValidationError);
}

TEST_CASE("baselines contract toward the mean") {
  const auto faces = synth::face_corpus({.identities = 3, .images_per_identity = 2, .seed = 5});
  for (const auto& s : faces.samples) {
    const double v = variance(s.image);
    for (int f : {2, 4, 8, 16}) CHECK(variance(eval::low_resolution(s.image, f)) <= v + 1e-12);
    for (auto [k, sigma] : {std::pair{3, 1.0}, {9, 3.0}, {13, 5.0}, {15, 7.0}})
      CHECK(variance(eval::defocus(s.image, k, sigma)) <= v + 1e-12);
  }
}

TEST_CASE("colour inversion") {
  Rng rng(5);
  const Tensor img = privisp::testing::random_tensor({2, 3, 4, 4}, rng, 0, 1);
  const Tensor twice = eval::invert_colors(eval::invert_colors(img));
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(twice[i] == doctest::Approx(img[i]).epsilon(1e-15));
  const Tensor gray({1, 3, 4, 4}, 0.5);
  CHECK(eval::invert_colors(gray) == gray);
}

TEST_CASE("preliminary inversion analysis") {
  const auto faces = synth::face_corpus({.identities = 3, .images_per_identity = 2, .seed = 6});
  // Inversion-invariant features: the extractor sees x and 1 - x alike.
  face::FunctionExtractor symmetric(4, [](const Tensor& x) {
    Tensor f({x.dim(0), 4});
    const std::size_t per = x.numel() / x.dim(0);
    for (int i = 0; i < x.dim(0); ++i)
      for (int k = 0; k < 4; ++k) f.at(i, k) = 1.0 + std::abs(x[i * per + k] - 0.5);
    return f;
  });
  const auto scenes = synth::scene_corpus({.scenes = 3, .size = 32, .seed = 7});
  Rng rng(1);
  det::CenterDetector detector(rng, 4);
  const auto r = eval::preliminary_inversion_analysis(faces.all_images(), symmetric, detector, scenes);
  CHECK(r.pairs == 6);
  CHECK(r.mean_similarity == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.same_identity_rate == 1.0);
  CHECK(r.miss_rate >= 0.0);
  CHECK(r.miss_rate <= 1.0);
}

TEST_CASE("Pareto dominance") {
  const auto ideal = point("ideal", 0.0, 0.8);
  std::vector<eval::SweepPoint> pts{point("a", 0.3, 0.7), point("b", 0.1, 0.5), ideal, point("c", 0.9, 0.8)};
  for (const auto& p : pts)
    if (p.method != "ideal") CHECK(eval::dominates(ideal, p));
  CHECK_FALSE(eval::dominates(pts[0], pts[0]));
  eval::mark_dominated(pts);
  CHECK(pts[0].dominated);
  CHECK(pts[1].dominated);
  CHECK_FALSE(pts[2].dominated);

  std::vector<eval::SweepPoint> twins{point("x", 0.2, 0.6), point("y", 0.2, 0.6)};
  eval::mark_dominated(twins);
  CHECK_FALSE(twins[0].dominated);
  CHECK_FALSE(twins[1].dominated);
}

TEST_CASE("trade-off sweep") {
  const auto faces = synth::face_corpus({.identities = 4, .images_per_identity = 2, .seed = 8});
  const auto scenes = synth::scene_corpus({.scenes = 4, .size = 32, .seed = 9});
  Rng rng(2);
  face::ConvEmbeddingNet net(32, 8, rng, 4);
  det::CenterDetector detector(rng, 4);
  const eval::SweepContext ctx{&faces, &net, &detector, &scenes, 3, 4};
  std::vector<eval::SweepConfig> configs{
      {"raw", "", [](const Tensor& x) { return x; }},
      {"low-resolution", "4", [](const Tensor& x) { return eval::low_resolution(x, 4); }},
      {"defocus", "9/3", [](const Tensor& x) { return eval::defocus(x, 9, 3.0); }}};
  const auto pts = eval::tradeoff_sweep(configs, ctx);
  REQUIRE(pts.size() == 3);
  for (const auto& p : pts) {
    CHECK(p.privacy >= 0.0);
    CHECK(p.privacy <= 1.0);
    CHECK(p.utility >= 0.0);
    CHECK(p.utility <= 1.0);
  }

  SUBCASE("permutation invariant") {
    auto rev = configs;
    std::reverse(rev.begin(), rev.end());
    auto back = eval::tradeoff_sweep(rev, ctx);
    std::reverse(back.begin(), back.end());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(back[i].method == pts[i].method);
      CHECK(back[i].privacy == pts[i].privacy);
      CHECK(back[i].utility == pts[i].utility);
      CHECK(back[i].dominated == pts[i].dominated);
    }
  }
  SUBCASE("CSV and plot") {
    const auto dir = temp_dir("sweep");
    eval::write_sweep_csv(pts, dir / "s.csv");
    eval::write_sweep_svg(pts, dir / "s.svg");
    std::ifstream in(dir / "s.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "method,parameter,privacy_accuracy,utility_ap,pareto_dominated");
    std::ifstream svg(dir / "s.svg");
    std::string first;
    std::getline(svg, first);
    CHECK(first.find("<svg") != std::string::npos);
    fs::remove_all(dir);
  }
}

TEST_CASE("feature export") {
  const auto faces = synth::face_corpus({.identities = 3, .images_per_identity = 3, .seed = 10});
  Rng rng(3);
  face::ConvEmbeddingNet net(32, 12, rng, 4);
  const auto dir = temp_dir("features");
  eval::export_features(net, faces, dir / "a.csv");
  eval::export_features(net, faces, dir / "b.csv");
  std::ifstream a(dir / "a.csv"), b(dir / "b.csv");
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));

  const auto table = eval::read_features(dir / "a.csv");
  REQUIRE(table.features.size() == 9);
  CHECK(table.features[0].size() == 12);
  CHECK(table.identities == std::vector<int>{0, 0, 0, 1, 1, 1, 2, 2, 2});
  const Tensor f = net.extract(faces.all_images());
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      const std::span<const double> fi(f.ptr() + i * 12, 12), fj(f.ptr() + j * 12, 12);
      CHECK(std::abs(face::cosine_similarity(table.features[i], table.features[j]) -
                     face::cosine_similarity(fi, fj)) < 1e-6);
    }
  fs::remove_all(dir);
}
