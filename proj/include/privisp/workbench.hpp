#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "privisp/attacks.hpp"
#include "privisp/detection.hpp"
#include "privisp/enhancer.hpp"
#include "privisp/face.hpp"
#include "privisp/synthetic.hpp"
#include "privisp/trainer.hpp"

// Configuration, dataset ingestion and experiment orchestration.
namespace privisp::wb {

enum class ExperimentKind {
  simulate,
  train_isp,
  train_enhancer,
  eval_afr,
  eval_utility,
  eval_iqa,
  attack,
  sweep,
  export_params,
  preliminary
};

/// CLI spelling, e.g. "train-isp".
const char* to_string(ExperimentKind kind);
ExperimentKind kind_from_string(const std::string& text);
const std::vector<ExperimentKind>& all_kinds();

/// Exactly one of root, manifest or synthetic is used (in that priority).
struct FaceSource {
  std::string root;
  std::string manifest;
  std::optional<synth::FaceCorpusSpec> synthetic;
};

struct SceneSource {
  std::string manifest;
  std::optional<synth::SceneCorpusSpec> synthetic;
};

struct DataConfig {
  FaceSource faces;        ///< evaluation identities
  FaceSource train_faces;  ///< clean extractor training and white-box re-training
  FaceSource proxy_faces;  ///< proxy identities of the adversarial game
  SceneSource scenes;      ///< detector, enhancer and game training scenes
  SceneSource test_scenes;
  std::string reference_images;  ///< eval-iqa: directory of reference images
  std::string test_images;       ///< eval-iqa: same file names; empty = capture the references
};

/// Built-in synthetic models; an empty path trains one and caches it under out/models.
struct ModelConfig {
  std::string extractor;
  std::string detector;
  std::string enhancer;
  int feature_dim = 128;
  int extractor_width = 16;
  int extractor_epochs = 14;
  double extractor_lr = 0.02;
  int extractor_decay_epoch = 8;
  int detector_width = 12;
  int detector_epochs = 30;
  double detector_lr = 2e-3;
  int enhancer_width = 8;
};

struct SweepSpec {
  std::vector<int> low_resolution{4, 8, 16};
  std::vector<std::pair<int, double>> defocus{{9, 3.0}, {13, 5.0}, {15, 7.0}};
  /// (label, ISP parameter file) pairs swept as "isp" points.
  std::vector<std::pair<std::string, std::string>> params;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::simulate;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::string params;      ///< ISP parameter file
  std::string checkpoint;  ///< export-params: adversarial checkpoint to convert
  int runs = 10;           ///< closed-set protocol runs
  bool export_features = false;
  DataConfig data;
  ModelConfig models;
  adv::TrainConfig train;
  attack::RetrainConfig retrain;
  enh::EnhancerConfig enhancer;
  SweepSpec sweep;
};

using Log = std::function<void(const std::string&)>;

/// Parses JSON text with `key.path=value` overrides applied first. Unknown keys
/// raise ParseError naming the key path; invariant violations raise
/// ValidationError naming the field. Every defaulted value is logged.
ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {},
                              const Log& log = {});
/// parse_config on a file, then checks that referenced paths exist.
ExperimentConfig validate_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                                 const Log& log = {});
void check_paths(const ExperimentConfig& config);
/// Fully resolved config as JSON; parse_config(to_json(c)) reproduces c.
std::string to_json(const ExperimentConfig& config);

std::uint64_t fnv1a(std::string_view bytes);
/// 16 hex digits of fnv1a over the resolved JSON.
std::string config_hash(const ExperimentConfig& config);

// ---------------------------------------------------------------- datasets

struct IngestionReport {
  std::vector<std::pair<std::string, std::string>> skipped;  ///< (path, reason)
  std::vector<std::string> flagged;                          ///< identities with fewer than two images
  std::vector<std::string> identity_names;                   ///< label i names identity_names[i]
};

/// Directory of identity-named subdirectories, or a CSV manifest (path,
/// identity). Numeric identity names keep their value; otherwise labels are
/// indices into the sorted names. Unreadable images are skipped and reported.
face::FaceDataset ingest_face_dataset(const std::filesystem::path& root_or_manifest, IngestionReport* report = nullptr);

/// CSV manifest (path, boxes, faces) with boxes as "cx cy w h" in normalised
/// image units separated by ';'.
std::vector<det::DetectionSample> ingest_detection_dataset(const std::filesystem::path& manifest,
                                                           IngestionReport* report = nullptr);

/// Writes <dir>/<identity>/<n>.png plus <dir>/manifest.csv.
void write_face_dataset(const face::FaceDataset& data, const std::filesystem::path& dir);
/// Writes <dir>/<n>.png plus <dir>/manifest.csv.
void write_detection_dataset(const std::vector<det::DetectionSample>& data, const std::filesystem::path& dir);

// ---------------------------------------------------------------- models

void save_model(const face::ConvEmbeddingNet& net, const std::filesystem::path& path);
face::ConvEmbeddingNet load_extractor(const std::filesystem::path& path);
void save_model(const det::CenterDetector& net, const std::filesystem::path& path);
det::CenterDetector load_detector(const std::filesystem::path& path);
void save_model(const enh::UNet& net, const std::filesystem::path& path);
enh::UNet load_enhancer(const std::filesystem::path& path);

// ---------------------------------------------------------------- results

struct ResultsRow {
  std::string experiment_id;
  std::string timestamp;
  std::string metric;
  double value = 0;
  std::string method;
  std::string dataset;
  std::string model;
};

/// Appends rows (header written when the file is new). Non-finite values are rejected.
void append_results(const std::filesystem::path& path, const std::vector<ResultsRow>& rows);
std::vector<ResultsRow> read_results(const std::filesystem::path& path);
/// Equal row by row with the timestamp column ignored.
bool same_results(const std::vector<ResultsRow>& a, const std::vector<ResultsRow>& b);

/// Exclusive ownership of an output directory for one process.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct RunSummary {
  std::string experiment_id;
  std::vector<ResultsRow> rows;
};

/// Dispatches on config.kind, writing results.csv, manifest.json and the
/// experiment's artifacts into config.out. Module errors are rethrown with the
/// experiment id prepended.
RunSummary run_experiment(const ExperimentConfig& config, const Log& log = {});

}  // namespace privisp::wb
