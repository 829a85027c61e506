#pragma once

#include <cstdint>
#include <vector>

#include "privisp/detection.hpp"
#include "privisp/face.hpp"
#include "privisp/rng.hpp"

// Procedural corpora so every experiment can run without downloads.
// Identity lives in a subtle skin tint plus a skin texture (orientation and
// frequency); per-sample nuisances are pose jitter, brightness, texture phase,
// background clutter and sensor noise.
namespace privisp::synth {

struct IdentitySignature {
  double skin[3];     ///< base sRGB skin colour
  double angle;       ///< texture orientation, radians
  double frequency;   ///< texture cycles per face width
  double amplitude;   ///< texture contrast
};

IdentitySignature make_identity(Rng& rng);
/// Deterministic signature for an identity label under a corpus seed.
IdentitySignature identity_signature(std::uint64_t corpus_seed, int identity);

/// One aligned face crop [1,3,size,size].
Tensor render_face(const IdentitySignature& id, Rng& rng, int size = 32);

struct FaceCorpusSpec {
  int identities = 10;
  int images_per_identity = 6;
  int first_identity = 0;  ///< labels are first_identity .. first_identity + identities - 1
  int size = 32;
  std::uint64_t seed = 1;
};
face::FaceDataset face_corpus(const FaceCorpusSpec& spec);

struct SceneCorpusSpec {
  int scenes = 100;
  int size = 64;
  int max_persons = 3;
  /// Identities drawn for the heads in the scene (labels offset from faces).
  int head_identities = 50;
  std::uint64_t seed = 2;
};
std::vector<det::DetectionSample> scene_corpus(const SceneCorpusSpec& spec);

}  // namespace privisp::synth
