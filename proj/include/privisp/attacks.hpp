#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "privisp/enhancer.hpp"
#include "privisp/face.hpp"

namespace privisp::attack {

/// Applies `capture_fn` to every image of a corpus, keeping labels and sources.
face::FaceDataset protect(const face::FaceDataset& data, const face::ImageFn& capture_fn);

/// Gray-box attack: gallery templates are re-enrolled through the camera.
face::ProtocolResult reenroll_gallery(const face::FaceDataset& data, face::FeatureExtractor& extractor,
                                      const face::ImageFn& capture_fn, face::ProtocolOptions opts = {});

enum class RetrainMode { finetune, scratch };

struct RetrainConfig {
  RetrainMode mode = RetrainMode::finetune;
  face::LossKind loss = face::LossKind::softmax;
  int epochs = 20;
  double lr = 0.02;
  /// lr is multiplied by lr_decay once this many epochs have completed.
  int decay_epoch = 15;
  double lr_decay = 0.1;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int batch_size = 32;
  double arc_scale = 64.0;
  double arc_margin = 0.5;
  /// Enroll gallery templates through the camera as well (the attacker knows it).
  bool protected_gallery = true;
  int runs = 10;
  std::uint64_t seed = 0;

  /// Schedule used against the large pretrained models (lr 1e-1).
  static RetrainConfig paper(RetrainMode mode, face::LossKind loss);
  void validate() const;
  /// "finetune-softmax", "scratch-arcface", ...
  std::string label() const;
};

struct RetrainResult {
  face::ConvEmbeddingNet model;
  face::ProtocolResult protocol;
  std::vector<double> epoch_losses;
  /// Closed-set accuracy on the protected test corpus after each epoch.
  std::vector<double> epoch_accuracies;
};

/// White-box attack: re-trains an identity model on the protected training
/// corpus and evaluates it on protected test queries.
RetrainResult retrain_fr(const face::ConvEmbeddingNet& extractor, const face::FaceDataset& train,
                         const face::FaceDataset& test, const face::ImageFn& capture_fn, const RetrainConfig& config);

struct RestorationResult {
  std::vector<double> epoch_losses;
  face::ProtocolResult protocol;
};

/// White-box restoration: an encoder-decoder learns to invert the capture with
/// plain MAE; queries are restored before identification against raw gallery.
RestorationResult train_restorer(enh::UNet& restorer, const Tensor& images, const face::ImageFn& capture_fn,
                                 const enh::EnhancerConfig& config, const face::FaceDataset& test,
                                 face::FeatureExtractor& extractor, int runs = 10, std::uint64_t seed = 0);

/// One row per attacked model; NaN marks an attack that was not run.
struct AttackReport {
  std::string model;
  double finetune_softmax, finetune_arcface, scratch_softmax, scratch_arcface, restoration;
  void validate() const;
};

void write_attack_report(const std::vector<AttackReport>& rows, const std::filesystem::path& path);

}  // namespace privisp::attack
