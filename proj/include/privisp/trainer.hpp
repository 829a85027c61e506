#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "privisp/detection.hpp"
#include "privisp/face.hpp"
#include "privisp/isp.hpp"
#include "privisp/optim.hpp"

// Three-player alternating optimisation of the ISP parameters against an
// adapting face-identification attacker, jointly with a person detector.
namespace privisp::adv {

enum class Mode { full, protector_only };
const char* to_string(Mode m);

struct TrainConfig {
  int m = 1;            ///< attacker steps per round
  int n = 1;            ///< protector steps per round
  int maxiters = 500;   ///< rounds
  double omega = 0.2;   ///< utility weight
  double lr_isp = 1e-3;
  double lr_face = 1e-2;  ///< larger steps let the small extractor blow up mid-game
  double lr_head = 1e-2;
  double lr_det = 1e-3;  ///< 1e-4 leaves the small detector unable to follow the camera
  double momentum = 0.9;
  double warmup_threshold = 0.90;
  int warmup_cap = 100;       ///< epochs
  double heldout_fraction = 0.2;
  int face_batch = 32;
  int det_batch = 16;
  int knots = isp::kDefaultGammaKnots;
  std::uint64_t seed = 0;
  Mode mode = Mode::full;

  /// Learning rates used against large pretrained models.
  static TrainConfig paper();
  /// Throws ValidationError naming the offending field.
  void validate() const;
};

struct LossRecord {
  int round = 0;
  int step = 0;          ///< index within the round
  bool attacker = true;  ///< attacker or protector step
  double ce = std::nan(""), ns = std::nan(""), cls = std::nan(""), box = std::nan("");
};

/// Live training state. Models are owned by the caller and must outlive it.
struct TrainState {
  TrainState(const TrainConfig& config, const isp::ISPParams& init, face::ConvEmbeddingNet& extractor,
             face::ProxyHead& head, det::DetectorModel& detector);

  TrainConfig config;
  isp::ISPVariables isp;
  face::ConvEmbeddingNet* extractor;
  face::ProxyHead* head;
  det::DetectorModel* detector;
  std::unique_ptr<optim::Adam> opt_isp;
  std::unique_ptr<optim::SGD> opt_face, opt_head, opt_det;
  int round = 0;
  std::vector<LossRecord> history;
  /// Last combined theta_C gradient applied by a protector step (ccm then gamma).
  std::vector<Tensor> last_isp_gradient;
  /// Where a diverging step saves the state before throwing (skipped when empty).
  std::filesystem::path divergence_dump;

  isp::ISPParams params() const { return isp.to_params(); }
};

struct FaceBatch {
  Tensor images;            ///< [B,3,H,W]
  std::vector<int> labels;  ///< proxy-head indices
};
struct DetBatch {
  Tensor images;
  std::vector<det::Boxes> boxes;
};

struct WarmupResult {
  int epochs = 0;
  double accuracy = 0.0;  ///< held-out proxy accuracy
};

/// Clean-image cross-entropy epochs until held-out accuracy reaches the
/// threshold. Throws WarmupError after `warmup_cap` epochs.
WarmupResult warmup(const face::FaceDataset& train, const face::FaceDataset& heldout, face::ConvEmbeddingNet& extractor,
                    face::ProxyHead& head, const TrainConfig& config);

/// Cross-entropy update of the extractor and head on captured faces; theta_C frozen.
void attacker_step(TrainState& state, const FaceBatch& batch);
/// Updates theta_C on L_ns + omega * L_det and the detector on L_det; projects theta_C.
void protector_step(TrainState& state, const FaceBatch& faces, const DetBatch& scenes, double omega);

struct RunResult {
  isp::ISPParams params;
  std::vector<LossRecord> history;
  WarmupResult warmup;
};

struct RunOptions {
  bool skip_warmup = false;
  std::filesystem::path checkpoint;  ///< written every `checkpoint_every` rounds when set
  int checkpoint_every = 50;
  std::filesystem::path resume;      ///< checkpoint to resume from when set
  std::filesystem::path divergence_dump;
};

/// Warmup, then maxiters rounds of m attacker and n protector steps (no
/// attacker steps in protector_only mode). Proxy identities are split into a
/// training part and a held-out part for the warmup criterion.
RunResult run(const TrainConfig& config, const face::FaceDataset& face_data,
              const std::vector<det::DetectionSample>& det_data, face::ConvEmbeddingNet& extractor,
              face::ProxyHead& head, det::DetectorModel& detector, const RunOptions& options = {});

/// Splits each identity's images: the trailing `fraction` (at least one when an
/// identity has two or more images) go to the held-out part.
std::pair<face::FaceDataset, face::FaceDataset> split_heldout(const face::FaceDataset& data, double fraction);

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Restores parameters, optimiser-independent state and round counter.
void load_checkpoint(TrainState& state, const std::filesystem::path& path);

std::string config_to_json(const TrainConfig& c);
TrainConfig config_from_json(const std::string& text);

}  // namespace privisp::adv
