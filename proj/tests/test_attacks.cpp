#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "privisp/attacks.hpp"
#include "privisp/error.hpp"
#include "privisp/evaluation.hpp"
#include "privisp/isp.hpp"
#include "privisp/ops.hpp"
#include "privisp/synthetic.hpp"
#include "testing.hpp"

using namespace privisp;
namespace fs = std::filesystem;

namespace {

// A fixed non-trivial camera: dark, desaturating curve.
Tensor dim_camera(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = 0.2 * v * v;
  return y;
}

}  // namespace

TEST_CASE("re-enrollment") {
  const auto data = synth::face_corpus({.identities = 6, .images_per_identity = 3, .seed = 4});
  Rng rng(1);
  face::ConvEmbeddingNet net(32, 8, rng, 4);

  SUBCASE("identity capture equals the unprotected baseline") {
    const auto base = face::closed_set_protocol(data, net, {.runs = 4, .seed = 3});
    const auto re = attack::reenroll_gallery(data, net, [](const Tensor& x) { return x; }, {.runs = 4, .seed = 3});
    CHECK(re.run_accuracies == base.run_accuracies);
  }
  SUBCASE("same gallery and query image gives perfect accuracy") {
    const auto re = attack::reenroll_gallery(data, net, dim_camera, {.runs = 3, .seed = 2, .same_image = true});
    CHECK(re.mean_accuracy == 1.0);
  }
  SUBCASE("protect keeps labels") {
    const auto p = attack::protect(data, dim_camera);
    REQUIRE(p.samples.size() == data.samples.size());
    for (std::size_t i = 0; i < p.samples.size(); ++i) {
      CHECK(p.samples[i].identity == data.samples[i].identity);
      CHECK(p.samples[i].image == dim_camera(data.samples[i].image));
    }
  }
}

TEST_CASE("angular margin zero keeps the cosine-softmax ordering") {
  Rng rng(2);
  const Tensor f = privisp::testing::random_tensor({5, 6}, rng);
  const Tensor w = privisp::testing::random_tensor({4, 6}, rng);
  const std::vector<int> labels{0, 3, 1, 2, 2};
  const double scale = 16.0;
  const Tensor arc = ad::angular_margin_logits(ad::constant(f), ad::constant(w), labels, scale, 0.0).value();
  auto norm = [](const double* p, int n) {
    double s = 0;
    for (int i = 0; i < n; ++i) s += p[i] * p[i];
    return std::sqrt(s);
  };
  for (int i = 0; i < 5; ++i) {
    std::vector<double> cosine(4), margin(4);
    for (int k = 0; k < 4; ++k) {
      double dot = 0;
      for (int j = 0; j < 6; ++j) dot += f.at(i, j) * w.at(k, j);
      cosine[k] = scale * dot / (norm(f.ptr() + i * 6, 6) * norm(w.ptr() + k * 6, 6));
      margin[k] = arc.at(i, k);
      CHECK(margin[k] == doctest::Approx(cosine[k]).epsilon(1e-12));
    }
    std::vector<int> oc(4), om(4);
    std::iota(oc.begin(), oc.end(), 0);
    std::iota(om.begin(), om.end(), 0);
    std::sort(oc.begin(), oc.end(), [&](int a, int b) { return cosine[a] > cosine[b]; });
    std::sort(om.begin(), om.end(), [&](int a, int b) { return margin[a] > margin[b]; });
    CHECK(oc == om);
  }
}

TEST_CASE("white-box retraining") {
  const auto train = synth::face_corpus({.identities = 8, .images_per_identity = 3, .first_identity = 100, .seed = 5});
  const auto test = synth::face_corpus({.identities = 5, .images_per_identity = 3, .seed = 5});
  Rng rng(3);
  face::ConvEmbeddingNet net(32, 8, rng, 4);

  SUBCASE("zero-epoch finetune equals the non-adaptive attack") {
    attack::RetrainConfig c;
    c.epochs = 0;
    c.runs = 4;
    c.seed = 6;
    c.protected_gallery = false;
    const auto r = attack::retrain_fr(net, train, test, dim_camera, c);
    const auto base = face::closed_set_protocol(test, net, {.protect_fn = dim_camera, .runs = 4, .seed = 6});
    CHECK(r.protocol.run_accuracies == base.run_accuracies);
    auto model = r.model;
    CHECK(model.extract(test.all_images()) == net.extract(test.all_images()));
  }
  SUBCASE("each configuration trains and records curves") {
    for (auto mode : {attack::RetrainMode::finetune, attack::RetrainMode::scratch})
      for (auto loss : {face::LossKind::softmax, face::LossKind::arcface}) {
        attack::RetrainConfig c;
        c.mode = mode;
        c.loss = loss;
        c.epochs = 2;
        c.runs = 2;
        c.batch_size = 8;
        const auto r = attack::retrain_fr(net, train, test, dim_camera, c);
        CHECK(r.epoch_losses.size() == 2);
        CHECK(r.epoch_accuracies.size() == 2);
        for (double l : r.epoch_losses) CHECK(std::isfinite(l));
        CHECK(r.protocol.mean_accuracy >= 0.0);
        CHECK(r.protocol.mean_accuracy <= 1.0);
      }
  }
  SUBCASE("the source extractor is left untouched") {
    const Tensor before = net.extract(test.all_images());
    attack::RetrainConfig c;
    c.epochs = 1;
    c.runs = 1;
    attack::retrain_fr(net, train, test, dim_camera, c);
    CHECK(net.extract(test.all_images()) == before);
  }
  SUBCASE("labels and presets") {
    attack::RetrainConfig c;
    c.mode = attack::RetrainMode::scratch;
    c.loss = face::LossKind::arcface;
    CHECK(c.label() == "scratch-arcface");
    const auto p = attack::RetrainConfig::paper(attack::RetrainMode::finetune, face::LossKind::softmax);
    CHECK(p.lr == 0.1);
    CHECK(p.epochs == 20);
    CHECK(p.decay_epoch == 15);
    c.epochs = -1;
    CHECK_THROWS_AS(c.validate(), ValidationError);
  }
}

TEST_CASE("restoration attack") {
  const auto test = synth::face_corpus({.identities = 4, .images_per_identity = 2, .size = 32, .seed = 7});
  const auto corpus = synth::face_corpus({.identities = 4, .images_per_identity = 2, .first_identity = 50, .seed = 7});
  const Tensor images = corpus.all_images();
  Rng rng(4);
  face::ConvEmbeddingNet net(32, 8, rng, 4);
  const enh::EnhancerConfig cfg{.epochs = 1, .batch_size = 8, .lr = 1e-3, .weight_decay = 0.0, .seed = 3};

  SUBCASE("same losses as the enhancer with all-ones masks") {
    Rng a(9), b(9);
    enh::UNet r1(a, 4), r2(b, 4);
    const auto restored = attack::train_restorer(r1, images, dim_camera, cfg, test, net, 2, 1);
    const Tensor ones({images.dim(0), 1, 32, 32}, 1.0);
    const auto direct = enh::train_enhancer(r2, images, dim_camera, ones, cfg);
    CHECK(restored.epoch_losses == direct);
  }
  SUBCASE("accuracy is a probability") {
    Rng a(10);
    enh::UNet r(a, 4);
    const auto res = attack::train_restorer(r, images, dim_camera, cfg, test, net, 2, 1);
    CHECK(res.protocol.mean_accuracy >= 0.0);
    CHECK(res.protocol.mean_accuracy <= 1.0);
  }
}

TEST_CASE("attack report") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<attack::AttackReport> rows{{"cam", 0.1, 0.2, 0.05, 0.07, 0.03}, {"raw", 0.8, nan, nan, nan, nan}};
  for (const auto& r : rows) CHECK_NOTHROW(r.validate());
  CHECK_THROWS_AS((attack::AttackReport{"bad", 1.5, 0, 0, 0, 0}.validate()), ValidationError);
  const auto path = fs::temp_directory_path() / ("privisp_report_" + std::to_string(::getpid()) + ".csv");
  attack::write_attack_report(rows, path);
  std::ifstream in(path);
  std::string header, first, second;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  CHECK(header == "model,finetune-softmax,finetune-arcface,scratch-softmax,scratch-arcface,restoration");
  CHECK(first.rfind("cam,0.1", 0) == 0);
  CHECK(second == "raw,0.80000000000000004,,,,");
  fs::remove(path);
}
