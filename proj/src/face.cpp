#include "privisp/face.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "privisp/error.hpp"
#include "privisp/ops.hpp"
#include "privisp/optim.hpp"

namespace privisp::face {

using ad::Var;

// ---------------------------------------------------------------- datasets

std::vector<int> FaceDataset::identities() const {
  std::set<int> ids;
  for (const auto& s : samples) ids.insert(s.identity);
  return {ids.begin(), ids.end()};
}

Tensor FaceDataset::images(std::span<const std::size_t> indices) const {
  std::vector<Tensor> parts;
  parts.reserve(indices.size());
  for (std::size_t i : indices) parts.push_back(samples.at(i).image);
  return Tensor::stack(parts);
}

std::vector<int> FaceDataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(samples.at(i).identity);
  return out;
}

Tensor FaceDataset::all_images() const {
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  return images(idx);
}

std::vector<int> FaceDataset::all_labels() const {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.identity);
  return out;
}

LabelIndex::LabelIndex(const std::vector<int>& identities) : labels(identities) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
}

int LabelIndex::index(int identity) const {
  auto it = std::lower_bound(labels.begin(), labels.end(), identity);
  if (it == labels.end() || *it != identity) throw ProtocolError("unknown identity " + std::to_string(identity));
  return static_cast<int>(it - labels.begin());
}

// ---------------------------------------------------------------- extractors

ConvEmbeddingNet::ConvEmbeddingNet(int input_size, int feature_dim, Rng& rng, int width)
    : input_size_(input_size), feature_dim_(feature_dim), width_(width) {
  if (input_size % 8 != 0 || input_size < 8) throw ValidationError("embedding input size must be a multiple of 8");
  c1_ = nn::Conv2d(3, width, 3, 2, 1, rng);
  c2_ = nn::Conv2d(width, 2 * width, 3, 2, 1, rng);
  c3_ = nn::Conv2d(2 * width, 2 * width, 3, 2, 1, rng);
  const int s = input_size / 8;
  fc_ = nn::Linear(2 * width * s * s, feature_dim, rng);
}

Var ConvEmbeddingNet::forward(const Var& images) const {
  const auto& sh = images.shape();
  if (sh.size() != 4 || sh[1] != 3 || sh[2] != input_size_ || sh[3] != input_size_)
    throw ValidationError("embedding net expects [N,3," + std::to_string(input_size_) + "," +
                          std::to_string(input_size_) + "]");
  constexpr double slope = 0.1;
  Var h = ad::add_scalar(images, -0.5);
  h = ad::leaky_relu(c1_(h), slope);
  h = ad::leaky_relu(c2_(h), slope);
  h = ad::leaky_relu(c3_(h), slope);
  return fc_(ad::flatten(h));
}

Tensor ConvEmbeddingNet::extract(const Tensor& images) { return forward(ad::constant(images)).value(); }

std::vector<Var> ConvEmbeddingNet::parameters() const {
  std::vector<Var> p;
  for (const auto& layer : {c1_, c2_, c3_})
    for (const Var& v : layer.parameters()) p.push_back(v);
  for (const Var& v : fc_.parameters()) p.push_back(v);
  return p;
}

ConvEmbeddingNet ConvEmbeddingNet::clone() const {
  ConvEmbeddingNet copy = *this;
  auto fresh = nn::clone_parameters(parameters());
  std::size_t i = 0;
  for (nn::Conv2d* layer : {&copy.c1_, &copy.c2_, &copy.c3_}) {
    layer->weight = fresh[i++];
    layer->bias = fresh[i++];
  }
  copy.fc_.weight = fresh[i++];
  copy.fc_.bias = fresh[i++];
  return copy;
}

Tensor RandomFeatureExtractor::extract(const Tensor& images) {
  const int n = images.dim(0);
  Tensor out({n, dim_});
  for (int i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int d = 0; d < dim_; ++d) {
      out.at(i, d) = rng_.normal();
      norm += out.at(i, d) * out.at(i, d);
    }
    norm = std::sqrt(norm);
    for (int d = 0; d < dim_; ++d) out.at(i, d) /= norm;
  }
  return out;
}

Tensor FunctionExtractor::extract(const Tensor& images) {
  Tensor out = fn_(images);
  if (out.rank() != 2 || out.dim(0) != images.dim(0) || out.dim(1) != dim_)
    throw ValidationError("external extractor returned " + out.shape_string());
  return out;
}

Tensor extract_batched(FeatureExtractor& extractor, const Tensor& images, int chunk) {
  const int n = images.dim(0);
  std::vector<Tensor> parts;
  for (int b = 0; b < n; b += chunk) parts.push_back(extractor.extract(images.slice_batch(b, std::min(n, b + chunk))));
  if (parts.empty()) return Tensor({0, extractor.feature_dim()});
  return Tensor::stack(parts);
}

ProxyHead::ProxyHead(int feature_dim, int num_identities, Rng& rng) {
  Tensor w({num_identities, feature_dim});
  const double std = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  for (double& v : w.values()) v = rng.normal(0.0, std);
  weight = Var(std::move(w), true);
}

Var ProxyHead::logits(const Var& features) const { return ad::linear(features, weight, Var()); }

ProxyHead ProxyHead::clone() const {
  ProxyHead h;
  h.weight = Var(weight.value(), weight.requires_grad());
  return h;
}

// ---------------------------------------------------------------- matching

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

int nearest_neighbor_identify(std::span<const double> query, const std::vector<GalleryEntry>& gallery) {
  if (gallery.empty()) throw ProtocolError("empty gallery");
  int best = gallery.front().identity;
  double best_sim = -2.0;
  for (const auto& g : gallery) {
    const double s = cosine_similarity(query, g.feature);
    if (s > best_sim) {
      best_sim = s;
      best = g.identity;
    }
  }
  return best;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) z += (v = std::exp(v - mx));
  for (double& v : p) v /= z;
  return p;
}

double ce_loss(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) throw RangeError("ce_loss: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return std::max(0.0, std::log(z) + mx - logits[label]);
}

double ns_loss(std::span<const double> probabilities, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probabilities.size())
    throw RangeError("ns_loss: label out of range");
  return -std::log(std::max(1.0 - probabilities[label], 1e-12));
}

std::vector<double> LinearClassifier::logits(std::span<const double> feature) const {
  const int c = weight.dim(0), d = weight.dim(1);
  if (static_cast<int>(feature.size()) != d) throw ValidationError("classifier: feature dimension mismatch");
  std::vector<double> out(bias);
  for (int k = 0; k < c; ++k)
    for (int j = 0; j < d; ++j) out[k] += weight.at(k, j) * feature[j];
  return out;
}

int LinearClassifier::classify(std::span<const double> feature) const {
  const auto z = logits(feature);
  return classes[static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin())];
}

LinearClassifier train_linear_classifier(const Tensor& features, const std::vector<int>& labels, int epochs,
                                         double lr) {
  if (features.rank() != 2 || static_cast<int>(labels.size()) != features.dim(0))
    throw ValidationError("train_linear_classifier: features/labels mismatch");
  if (labels.empty()) throw ProtocolError("train_linear_classifier: no samples");
  LabelIndex index(labels);
  const int n = features.dim(0), d = features.dim(1), c = index.size();
  LinearClassifier clf;
  clf.classes = index.labels;
  clf.weight = Tensor({c, d});
  clf.bias.assign(static_cast<std::size_t>(c), 0.0);
  std::vector<int> y(labels.size());
  for (int i = 0; i < n; ++i) y[i] = index.index(labels[i]);
  Tensor gw({c, d});
  std::vector<double> gb(static_cast<std::size_t>(c));
  for (int e = 0; e < epochs; ++e) {
    gw.fill(0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      std::span<const double> x(features.ptr() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d));
      auto p = softmax(clf.logits(x));
      p[y[i]] -= 1.0;
      for (int k = 0; k < c; ++k) {
        gb[k] += p[k] / n;
        for (int j = 0; j < d; ++j) gw.at(k, j) += p[k] * x[j] / n;
      }
    }
    for (int k = 0; k < c; ++k) {
      clf.bias[k] -= lr * gb[k];
      for (int j = 0; j < d; ++j) clf.weight.at(k, j) -= lr * gw.at(k, j);
    }
  }
  return clf;
}

// ---------------------------------------------------------------- protocol

ProtocolResult closed_set_protocol(const FaceDataset& data, FeatureExtractor& extractor, const ProtocolOptions& opts) {
  if (opts.runs < 1) throw ProtocolError("closed_set_protocol: runs must be >= 1");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_id[data.samples[i].identity].push_back(i);
  ProtocolResult res;
  std::vector<int> ids;
  for (const auto& [id, idx] : by_id) {
    if (idx.size() >= 2 || (opts.same_image && !idx.empty()))
      ids.push_back(id);
    else
      ++res.excluded_identities;
  }
  if (ids.empty()) throw ProtocolError("closed_set_protocol: no identity has two images");
  res.identities = static_cast<int>(ids.size());

  for (int r = 0; r < opts.runs; ++r) {
    Rng rng(derive_seed(opts.seed, static_cast<std::uint64_t>(r)));
    std::vector<std::size_t> gal, qry;
    for (int id : ids) {
      auto idx = by_id[id];
      rng.shuffle(idx);
      gal.push_back(idx[0]);
      qry.push_back(opts.same_image ? idx[0] : idx[1]);
    }
    Tensor gimg = data.images(gal);
    Tensor qimg = data.images(qry);
    if (opts.gallery_fn) gimg = opts.gallery_fn(gimg);
    if (opts.protect_fn) qimg = opts.protect_fn(qimg);
    const Tensor gf = extract_batched(extractor, gimg);
    const Tensor qf = extract_batched(extractor, qimg);
    const int d = gf.dim(1);
    auto row = [d](const Tensor& t, int i) {
      return std::span<const double>(t.ptr() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d));
    };
    int correct = 0;
    if (opts.classifier == ClassifierKind::nearest) {
      std::vector<GalleryEntry> gallery;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        auto f = row(gf, static_cast<int>(i));
        gallery.push_back({ids[i], {f.begin(), f.end()}});
      }
      for (std::size_t i = 0; i < ids.size(); ++i)
        correct += nearest_neighbor_identify(row(qf, static_cast<int>(i)), gallery) == ids[i];
    } else {
      const auto clf = train_linear_classifier(gf, ids);
      for (std::size_t i = 0; i < ids.size(); ++i) correct += clf.classify(row(qf, static_cast<int>(i))) == ids[i];
    }
    res.run_accuracies.push_back(static_cast<double>(correct) / static_cast<double>(ids.size()));
  }
  const double n = static_cast<double>(res.run_accuracies.size());
  res.mean_accuracy = std::accumulate(res.run_accuracies.begin(), res.run_accuracies.end(), 0.0) / n;
  double var = 0.0;
  for (double a : res.run_accuracies) var += (a - res.mean_accuracy) * (a - res.mean_accuracy);
  res.stddev = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  return res;
}

// ---------------------------------------------------------------- training

FitResult fit_identity_model(ConvEmbeddingNet& net, ProxyHead& head, const FaceDataset& data, const FitOptions& opts) {
  LabelIndex index(data.identities());
  if (index.size() != head.num_identities())
    throw ValidationError("fit_identity_model: head has " + std::to_string(head.num_identities()) +
                          " outputs for " + std::to_string(index.size()) + " identities");
  auto params = net.parameters();
  params.push_back(head.weight);
  nn::set_requires_grad(params, true);
  optim::SGD opt(params, opts.lr, opts.momentum, opts.weight_decay);
  Rng rng(opts.seed);
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  FitResult res;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    opt.set_learning_rate(opts.decay_epoch >= 0 && epoch >= opts.decay_epoch ? opts.lr * opts.lr_decay : opts.lr);
    rng.shuffle(order);
    double total = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(opts.batch_size)) {
      std::span<const std::size_t> idx(order.data() + b, std::min<std::size_t>(opts.batch_size, order.size() - b));
      Tensor x = data.images(idx);
      if (opts.transform) x = opts.transform(x);
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(index.index(data.samples[i].identity));
      opt.zero_grad();
      Var feats = net.forward(ad::constant(std::move(x)));
      Var logits = opts.loss == LossKind::softmax
                       ? head.logits(feats)
                       : ad::angular_margin_logits(feats, head.weight, y, opts.arc_scale, opts.arc_margin);
      Var loss = ad::cross_entropy(logits, y);
      if (!std::isfinite(loss.item())) throw DivergenceError("identity model loss became non-finite at epoch " +
                                                             std::to_string(epoch));
      ad::backward(loss);
      opt.step();
      total += loss.item();
      ++batches;
    }
    res.epoch_losses.push_back(total / std::max(1, batches));
    if (opts.on_epoch) opts.on_epoch(epoch, res.epoch_losses.back());
  }
  return res;
}

double head_accuracy(ConvEmbeddingNet& net, const ProxyHead& head, const FaceDataset& data, const ImageFn& transform) {
  if (data.samples.empty()) return 0.0;
  LabelIndex index(data.identities());
  Tensor x = data.all_images();
  if (transform) x = transform(x);
  const Tensor feats = extract_batched(net, x);
  const Tensor logits = head.logits(ad::constant(feats)).value();
  const int c = logits.dim(1);
  int correct = 0;
  for (int i = 0; i < logits.dim(0); ++i) {
    const double* row = logits.ptr() + static_cast<std::size_t>(i) * c;
    correct += (std::max_element(row, row + c) - row) == index.index(data.samples[i].identity);
  }
  return static_cast<double>(correct) / logits.dim(0);
}

}  // namespace privisp::face
