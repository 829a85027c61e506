#include <filesystem>
#include <cmath>
#include <fstream>
#include <map>

#include "doctest.h"
#include "privisp/error.hpp"
#include "privisp/image_io.hpp"
#include "privisp/isp.hpp"
#include "privisp/workbench.hpp"
#include "testing.hpp"

using namespace privisp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag)
      : path(fs::temp_directory_path() / (std::string("privisp_wb_") + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

fs::path identity_params(const fs::path& dir) {
  const auto p = dir / "params.json";
  write_text(p, isp::params_to_json(isp::ISPParams::identity()));
  return p;
}

Tensor tile(double r, double g, double b) {
  Tensor t({1, 3, 8, 8});
  for (int i = 0; i < 64; ++i) {
    t[i] = r;
    t[64 + i] = g;
    t[128 + i] = b;
  }
  return t;
}

}  // namespace

TEST_CASE("config parsing") {
  TempDir dir("config");
  const auto params = identity_params(dir.path).string();

  SUBCASE("minimal simulate config gets defaults") {
    std::vector<std::string> logged;
    const auto c = wb::parse_config(R"({"params": ")" + params + R"(", "seed": 4})", {},
                                    [&](const std::string& s) { logged.push_back(s); });
    CHECK(c.kind == wb::ExperimentKind::simulate);
    CHECK(c.train.omega == 0.2);
    CHECK(c.train.seed == 4);
    CHECK(c.runs == 10);
    CHECK_FALSE(logged.empty());
    CHECK(std::find(logged.begin(), logged.end(), "default train.omega = 0.2") != logged.end());
    CHECK_NOTHROW(wb::check_paths(c));
  }
  SUBCASE("negative omega names the field") {
    try {
      wb::parse_config(R"({"params": "x", "seed": 1, "train": {"omega": -1}})");
      FAIL("accepted omega -1");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("train.omega") != std::string::npos);
    }
  }
  SUBCASE("overrides and unknown keys") {
    const auto c = wb::parse_config(R"({"params": "x", "seed": 1})", {"train.omega=0.5", "out=elsewhere"});
    CHECK(c.train.omega == 0.5);
    CHECK(c.out == "elsewhere");
    try {
      wb::parse_config(R"({"params": "x", "seed": 1, "data": {"faces": {"bogus": 1}}})");
      FAIL("accepted unknown key");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("data.faces.bogus") != std::string::npos);
    }
    CHECK_THROWS_AS(wb::parse_config(R"({"params": "x"})"), ValidationError);
    CHECK_THROWS_AS(wb::parse_config(R"({"seed": 1})"), ValidationError);
    CHECK_THROWS_AS(wb::parse_config("{not json"), ParseError);
  }
  SUBCASE("resolved config is a fixed point") {
    const auto c = wb::parse_config(R"({"kind": "eval-afr", "params": "x", "seed": 9, "runs": 3})");
    const auto once = wb::to_json(c);
    const auto twice = wb::to_json(wb::parse_config(once));
    CHECK(once == twice);
    CHECK(wb::config_hash(c) == wb::config_hash(wb::parse_config(once)));
    CHECK(wb::config_hash(c).size() == 16);
  }
  SUBCASE("missing paths are reported") {
    const auto c = wb::parse_config(R"({"params": "/nonexistent/p.json", "seed": 1})");
    CHECK_THROWS_AS(wb::check_paths(c), ValidationError);
  }
  SUBCASE("kind names round trip") {
    for (auto k : wb::all_kinds()) CHECK(wb::kind_from_string(wb::to_string(k)) == k);
    CHECK_THROWS(wb::kind_from_string("train"));
  }
}

TEST_CASE("face dataset ingestion") {
  TempDir dir("ingest");
  const auto root = dir.path / "faces";
  const char* names[] = {"alice", "bob", "carol"};
  for (int id = 0; id < 3; ++id)
    for (int k = 0; k < 2; ++k) {
      fs::create_directories(root / names[id]);
      io::write_image(tile(0.1 * id, 0.2 + 0.1 * k, 0.5), root / names[id] / (std::to_string(k) + ".png"));
    }

  SUBCASE("three identities with two images each") {
    wb::IngestionReport report;
    const auto d = wb::ingest_face_dataset(root, &report);
    CHECK(d.samples.size() == 6);
    CHECK(d.identities() == std::vector<int>{0, 1, 2});
    CHECK(report.identity_names == std::vector<std::string>{"alice", "bob", "carol"});
    CHECK(report.flagged.empty());
  }
  SUBCASE("single-image identity is flagged and excluded from the protocol") {
    fs::create_directories(root / "dave");
    io::write_image(tile(0.9, 0.9, 0.9), root / "dave" / "0.png");
    wb::IngestionReport report;
    const auto d = wb::ingest_face_dataset(root, &report);
    CHECK(report.flagged == std::vector<std::string>{"dave"});
    face::FunctionExtractor ex(3, [](const Tensor& x) {
      Tensor f({x.dim(0), 3});
      for (int i = 0; i < x.dim(0); ++i)
        for (int c = 0; c < 3; ++c) f.at(i, c) = 0.1 + x.at(i, c, 0, 0);
      return f;
    });
    CHECK(face::closed_set_protocol(d, ex, {.runs = 1}).excluded_identities == 1);
  }
  SUBCASE("unreadable files are skipped") {
    write_text(root / "alice" / "broken.png", "not an image");
    wb::IngestionReport report;
    const auto d = wb::ingest_face_dataset(root, &report);
    CHECK(d.samples.size() == 6);
    CHECK(report.skipped.size() == 1);
  }
  SUBCASE("manifest and directory layouts agree") {
    std::string manifest = "path,identity\n";
    for (int id = 2; id >= 0; --id)
      for (int k = 0; k < 2; ++k)
        manifest += (root / names[id] / (std::to_string(k) + ".png")).string() + "," + names[id] + "\n";
    write_text(dir.path / "manifest.csv", manifest);
    const auto a = wb::ingest_face_dataset(root);
    const auto b = wb::ingest_face_dataset(dir.path / "manifest.csv");
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      CHECK(a.samples[i].identity == b.samples[i].identity);
      CHECK(a.samples[i].image == b.samples[i].image);
    }
  }
  SUBCASE("written corpora read back") {
    const auto d = wb::ingest_face_dataset(root);
    wb::write_face_dataset(d, dir.path / "copy");
    const auto back = wb::ingest_face_dataset(dir.path / "copy");
    REQUIRE(back.samples.size() == d.samples.size());
    for (std::size_t i = 0; i < d.samples.size(); ++i) CHECK(back.samples[i].image == d.samples[i].image);
  }
}

TEST_CASE("detection dataset ingestion") {
  TempDir dir("det");
  io::write_image(tile(0.2, 0.3, 0.4), dir.path / "a.png");
  write_text(dir.path / "m.csv", "path,boxes,faces\n" + (dir.path / "a.png").string() +
                                     ",0.5 0.5 0.2 0.4;0.2 0.3 0.1 0.1,0.5 0.35 0.1 0.1\n");
  const auto d = wb::ingest_detection_dataset(dir.path / "m.csv");
  REQUIRE(d.size() == 1);
  CHECK(d[0].boxes.size() == 2);
  CHECK(d[0].faces.size() == 1);
  CHECK(d[0].boxes[0].w == doctest::Approx(0.2));
  wb::write_detection_dataset(d, dir.path / "copy");
  const auto back = wb::ingest_detection_dataset(dir.path / "copy" / "manifest.csv");
  REQUIRE(back.size() == 1);
  CHECK(back[0].boxes.size() == 2);
  CHECK(back[0].image == d[0].image);
}

TEST_CASE("results files") {
  TempDir dir("results");
  const std::vector<wb::ResultsRow> rows{{"x-1", "t0", "accuracy", 0.5, "raw", "toy", "m"},
                                         {"x-1", "t0", "ap", 0.25, "raw", "toy", "d"}};
  wb::append_results(dir.path / "r.csv", rows);
  auto later = rows;
  for (auto& r : later) r.timestamp = "t1";
  wb::append_results(dir.path / "r.csv", later);
  const auto back = wb::read_results(dir.path / "r.csv");
  REQUIRE(back.size() == 4);
  CHECK(wb::same_results({back[0], back[1]}, {back[2], back[3]}));
  CHECK_THROWS_AS(wb::append_results(dir.path / "r.csv", {{"x", "t", "m", std::nan(""), "", "", ""}}), ValidationError);
}

TEST_CASE("output lock") {
  TempDir dir("lock");
  {
    wb::OutputLock lock(dir.path);
    CHECK_THROWS_AS(wb::OutputLock(dir.path), LockError);
  }
  CHECK_NOTHROW(wb::OutputLock(dir.path));
}

TEST_CASE("eval-iqa runs") {
  TempDir dir("iqa");
  fs::create_directories(dir.path / "ref");
  fs::create_directories(dir.path / "test");
  Rng rng(1);
  for (int i = 0; i < 3; ++i) {
    Tensor img({1, 3, 16, 16});
    for (double& v : img.values()) v = rng.integer(0, 255) / 255.0;
    io::write_image(img, dir.path / "ref" / (std::to_string(i) + ".png"));
    io::write_image(img, dir.path / "test" / (std::to_string(i) + ".png"));
  }
  const auto text = R"({"kind": "eval-iqa", "seed": 2, "out": ")" + (dir.path / "out").string() +
                    R"(", "data": {"reference_images": ")" + (dir.path / "ref").string() +
                    R"(", "test_images": ")" + (dir.path / "test").string() + R"("}})";
  const auto config = wb::parse_config(text);

  SUBCASE("identical corpora score perfectly") {
    const auto r = wb::run_experiment(config);
    std::map<std::string, double> m;
    for (const auto& row : r.rows) m[row.metric] = row.value;
    CHECK(m.at("rmse") == 0.0);
    CHECK(m.at("psnr") == 100.0);
    CHECK(m.at("ssim") == doctest::Approx(1.0));
    CHECK(m.at("ms_ssim") == doctest::Approx(1.0));
    CHECK(fs::exists(dir.path / "out" / ("manifest-" + r.experiment_id + ".json")));
    CHECK_FALSE(fs::exists(dir.path / "out" / ".lock"));
  }
  SUBCASE("same config twice gives the same results") {
    const auto a = wb::run_experiment(config);
    const auto b = wb::run_experiment(config);
    CHECK(a.experiment_id == b.experiment_id);
    const auto all = wb::read_results(dir.path / "out" / "results.csv");
    REQUIRE(all.size() == 2 * a.rows.size());
    const std::vector<wb::ResultsRow> first(all.begin(), all.begin() + static_cast<long>(a.rows.size()));
    const std::vector<wb::ResultsRow> second(all.begin() + static_cast<long>(a.rows.size()), all.end());
    CHECK(wb::same_results(first, second));
  }
  SUBCASE("a held lock stops a second run") {
    wb::OutputLock lock(dir.path / "out");
    CHECK_THROWS_AS(wb::run_experiment(config), LockError);
  }
}

TEST_CASE("model files round trip") {
  TempDir dir("models");
  Rng rng(3);
  face::ConvEmbeddingNet net(32, 8, rng, 4);
  wb::save_model(net, dir.path / "e.json");
  auto back = wb::load_extractor(dir.path / "e.json");
  const Tensor x = privisp::testing::random_tensor({2, 3, 32, 32}, rng, 0, 1);
  CHECK(back.extract(x) == net.extract(x));

  det::CenterDetector d(rng, 4);
  wb::save_model(d, dir.path / "d.json");
  auto dback = wb::load_detector(dir.path / "d.json");
  CHECK(dback.detect(x).size() == 2);

  enh::UNet u(rng, 4);
  wb::save_model(u, dir.path / "u.json");
  const auto uback = wb::load_enhancer(dir.path / "u.json");
  CHECK(enh::enhance(uback, x) == enh::enhance(u, x));
  CHECK_THROWS_AS(wb::load_detector(dir.path / "u.json"), ParseError);
}
