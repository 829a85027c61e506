#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "privisp/autograd.hpp"
#include "privisp/nn.hpp"
#include "privisp/rng.hpp"
#include "privisp/tensor.hpp"

namespace privisp::face {

/// Image batch transform [N,3,H,W] -> [N,3,H,W] (protection, capture, restoration).
using ImageFn = std::function<Tensor(const Tensor&)>;

struct FaceSample {
  Tensor image;  ///< [1,3,H,W] sRGB in [0,1]
  int identity = 0;
  std::string source;  ///< file path or synthetic tag
};

struct FaceDataset {
  std::vector<FaceSample> samples;

  /// Sorted distinct labels.
  std::vector<int> identities() const;
  /// Stacks the images at `indices` into [n,3,H,W].
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<int> labels(std::span<const std::size_t> indices) const;
  Tensor all_images() const;
  std::vector<int> all_labels() const;
};

/// Maps arbitrary identity labels onto 0..C-1 in ascending label order.
struct LabelIndex {
  explicit LabelIndex(const std::vector<int>& identities);
  int index(int identity) const;
  int size() const { return static_cast<int>(labels.size()); }
  std::vector<int> labels;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// [N,3,H,W] -> [N,feature_dim]. Not const: some adapters carry state.
  virtual Tensor extract(const Tensor& images) = 0;
  virtual int feature_dim() const = 0;
};

/// Small convolutional embedding network: three stride-2 3x3 convolutions
/// with leaky ReLU, then a linear projection to `feature_dim`.
class ConvEmbeddingNet : public FeatureExtractor {
 public:
  ConvEmbeddingNet(int input_size, int feature_dim, Rng& rng, int width = 16);

  ad::Var forward(const ad::Var& images) const;
  Tensor extract(const Tensor& images) override;
  int feature_dim() const override { return feature_dim_; }
  int input_size() const { return input_size_; }
  int width() const { return width_; }

  std::vector<ad::Var> parameters() const;
  /// Independent copy with its own parameter storage.
  ConvEmbeddingNet clone() const;

 private:
  int input_size_, feature_dim_, width_;
  nn::Conv2d c1_, c2_, c3_;
  nn::Linear fc_;
};

/// Returns a fresh i.i.d. random unit vector for every image it sees.
class RandomFeatureExtractor : public FeatureExtractor {
 public:
  RandomFeatureExtractor(int feature_dim, std::uint64_t seed) : dim_(feature_dim), rng_(seed) {}
  Tensor extract(const Tensor& images) override;
  int feature_dim() const override { return dim_; }

 private:
  int dim_;
  Rng rng_;
};

/// Wraps any callable, e.g. an external model bridged through a subprocess.
class FunctionExtractor : public FeatureExtractor {
 public:
  FunctionExtractor(int feature_dim, std::function<Tensor(const Tensor&)> fn) : dim_(feature_dim), fn_(std::move(fn)) {}
  Tensor extract(const Tensor& images) override;
  int feature_dim() const override { return dim_; }

 private:
  int dim_;
  std::function<Tensor(const Tensor&)> fn_;
};

/// Bias-free linear classification head over a fixed proxy identity set.
struct ProxyHead {
  ProxyHead() = default;
  ProxyHead(int feature_dim, int num_identities, Rng& rng);
  ad::Var logits(const ad::Var& features) const;
  int num_identities() const { return weight.shape()[0]; }
  ProxyHead clone() const;
  ad::Var weight;  ///< [num_identities, feature_dim]
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct GalleryEntry {
  int identity;
  std::vector<double> feature;
};
/// Identity of the most cosine-similar gallery entry; ties go to the lowest index.
int nearest_neighbor_identify(std::span<const double> query, const std::vector<GalleryEntry>& gallery);

/// Softmax regression trained by full-batch gradient descent.
struct LinearClassifier {
  std::vector<int> classes;  ///< identity label per output
  Tensor weight;             ///< [C, D]
  std::vector<double> bias;

  std::vector<double> logits(std::span<const double> feature) const;
  int classify(std::span<const double> feature) const;
};
LinearClassifier train_linear_classifier(const Tensor& features, const std::vector<int>& labels, int epochs = 200,
                                         double lr = 0.1);

/// -log softmax(logits)[label]
double ce_loss(std::span<const double> logits, int label);
/// -log(max(1 - p[label], 1e-12))
double ns_loss(std::span<const double> probabilities, int label);
std::vector<double> softmax(std::span<const double> logits);

enum class ClassifierKind { nearest, linear };

struct ProtocolOptions {
  ImageFn protect_fn;  ///< applied to queries; empty = unprotected
  ImageFn gallery_fn;  ///< applied to gallery images; empty = unprotected
  ClassifierKind classifier = ClassifierKind::nearest;
  int runs = 10;
  std::uint64_t seed = 0;
  /// When set, gallery and query use the same image of each identity.
  bool same_image = false;
};

struct ProtocolResult {
  double mean_accuracy = 0.0;
  double stddev = 0.0;  ///< across runs
  std::vector<double> run_accuracies;
  int identities = 0;
  int excluded_identities = 0;  ///< fewer than two images
};

/// Closed-set top-1 identification: one gallery and one distinct query image
/// per retained identity in each run.
ProtocolResult closed_set_protocol(const FaceDataset& data, FeatureExtractor& extractor, const ProtocolOptions& opts);

// --- training of identity models (attacker warmup, clean baselines, re-training)

enum class LossKind { softmax, arcface };

struct FitOptions {
  int epochs = 20;
  int batch_size = 32;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Epoch after which lr is multiplied by lr_decay (never when < 0).
  int decay_epoch = -1;
  double lr_decay = 0.1;
  LossKind loss = LossKind::softmax;
  double arc_scale = 64.0;
  double arc_margin = 0.5;
  /// Applied to every training batch (e.g. virtual capture for protected corpora).
  ImageFn transform;
  std::uint64_t seed = 0;
  /// Called after each epoch with (epoch, mean train loss).
  std::function<void(int, double)> on_epoch;
};

struct FitResult {
  std::vector<double> epoch_losses;
};

/// Trains extractor + head jointly on identity classification.
FitResult fit_identity_model(ConvEmbeddingNet& net, ProxyHead& head, const FaceDataset& data,
                             const FitOptions& opts);

/// Fraction of samples whose head argmax equals the label.
double head_accuracy(ConvEmbeddingNet& net, const ProxyHead& head, const FaceDataset& data, const ImageFn& transform = {});

/// Features for a whole image batch, evaluated in chunks.
Tensor extract_batched(FeatureExtractor& extractor, const Tensor& images, int chunk = 64);

}  // namespace privisp::face
