#include "privisp/attacks.hpp"

#include <cmath>
#include <fstream>

#include "privisp/error.hpp"

namespace privisp::attack {

face::FaceDataset protect(const face::FaceDataset& data, const face::ImageFn& capture_fn) {
  face::FaceDataset out = data;
  if (!capture_fn) return out;
  constexpr std::size_t chunk = 64;
  for (std::size_t b = 0; b < data.samples.size(); b += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(data.samples.size(), b + chunk); ++i) idx.push_back(i);
    const Tensor captured = capture_fn(data.images(idx));
    const std::size_t per = captured.numel() / idx.size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Tensor& img = out.samples[idx[k]].image;
      std::copy(captured.ptr() + k * per, captured.ptr() + (k + 1) * per, img.ptr());
    }
  }
  return out;
}

face::ProtocolResult reenroll_gallery(const face::FaceDataset& data, face::FeatureExtractor& extractor,
                                      const face::ImageFn& capture_fn, face::ProtocolOptions opts) {
  opts.protect_fn = capture_fn;
  opts.gallery_fn = capture_fn;
  return face::closed_set_protocol(data, extractor, opts);
}

RetrainConfig RetrainConfig::paper(RetrainMode mode, face::LossKind loss) {
  RetrainConfig c;
  c.mode = mode;
  c.loss = loss;
  c.lr = 0.1;
  return c;
}

void RetrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs: must be >= 0");
  if (!(lr > 0)) throw ValidationError("lr: must be > 0");
  if (weight_decay < 0) throw ValidationError("weight_decay: must be >= 0");
  if (arc_margin < 0) throw ValidationError("arc_margin: must be >= 0");
  if (!(arc_scale > 0)) throw ValidationError("arc_scale: must be > 0");
  if (batch_size < 1) throw ValidationError("batch_size: must be >= 1");
  if (runs < 1) throw ValidationError("runs: must be >= 1");
}

std::string RetrainConfig::label() const {
  return std::string(mode == RetrainMode::finetune ? "finetune" : "scratch") + "-" +
         (loss == face::LossKind::softmax ? "softmax" : "arcface");
}

RetrainResult retrain_fr(const face::ConvEmbeddingNet& extractor, const face::FaceDataset& train,
                         const face::FaceDataset& test, const face::ImageFn& capture_fn, const RetrainConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 31));
  RetrainResult res{config.mode == RetrainMode::finetune
                        ? extractor.clone()
                        : face::ConvEmbeddingNet(extractor.input_size(), extractor.feature_dim(), rng, extractor.width()),
                    {}, {}, {}};
  const face::FaceDataset ptrain = protect(train, capture_fn);
  face::ProtocolOptions popts;
  popts.protect_fn = capture_fn;
  if (config.protected_gallery) popts.gallery_fn = capture_fn;
  popts.runs = config.runs;
  popts.seed = config.seed;

  if (config.epochs > 0) {
    face::ProxyHead head(extractor.feature_dim(), static_cast<int>(ptrain.identities().size()), rng);
    face::FitOptions fo;
    fo.epochs = config.epochs;
    fo.batch_size = config.batch_size;
    fo.lr = config.lr;
    fo.momentum = config.momentum;
    fo.weight_decay = config.weight_decay;
    fo.decay_epoch = config.decay_epoch;
    fo.lr_decay = config.lr_decay;
    fo.loss = config.loss;
    fo.arc_scale = config.arc_scale;
    fo.arc_margin = config.arc_margin;
    fo.seed = derive_seed(config.seed, 32);
    fo.on_epoch = [&](int, double) {
      res.epoch_accuracies.push_back(face::closed_set_protocol(test, res.model, popts).mean_accuracy);
    };
    res.epoch_losses = face::fit_identity_model(res.model, head, ptrain, fo).epoch_losses;
  }
  res.protocol = face::closed_set_protocol(test, res.model, popts);
  return res;
}

RestorationResult train_restorer(enh::UNet& restorer, const Tensor& images, const face::ImageFn& capture_fn,
                                 const enh::EnhancerConfig& config, const face::FaceDataset& test,
                                 face::FeatureExtractor& extractor, int runs, std::uint64_t seed) {
  Tensor ones({images.dim(0), 1, images.dim(2), images.dim(3)});
  ones.fill(1.0);
  RestorationResult res;
  res.epoch_losses = enh::train_enhancer(restorer, images, capture_fn, ones, config);
  face::ProtocolOptions opts;
  opts.protect_fn = [&](const Tensor& x) { return enh::enhance(restorer, capture_fn ? capture_fn(x) : x); };
  opts.runs = runs;
  opts.seed = seed;
  res.protocol = face::closed_set_protocol(test, extractor, opts);
  return res;
}

void AttackReport::validate() const {
  for (double v : {finetune_softmax, finetune_arcface, scratch_softmax, scratch_arcface, restoration})
    if (!std::isnan(v) && (v < 0 || v > 1)) throw ValidationError("attack report accuracies must lie in [0,1]");
}

void write_attack_report(const std::vector<AttackReport>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "model,finetune-softmax,finetune-arcface,scratch-softmax,scratch-arcface,restoration\n";
  for (const auto& r : rows) {
    r.validate();
    out << r.model;
    for (double v : {r.finetune_softmax, r.finetune_arcface, r.scratch_softmax, r.scratch_arcface, r.restoration}) {
      out << ',';
      if (!std::isnan(v)) out << v;
    }
    out << '\n';
  }
}

}  // namespace privisp::attack
