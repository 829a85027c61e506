#include "privisp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "privisp/error.hpp"
#include "privisp/ops.hpp"

namespace privisp::adv {

using ad::Var;
using nlohmann::json;

const char* to_string(Mode m) { return m == Mode::full ? "full" : "protector_only"; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.lr_face = 1e-1;
  c.lr_head = 1e-1;
  c.lr_det = 1e-4;
  return c;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw ValidationError(std::string(field) + ": " + why);
  };
  require(m >= 1, "m", "must be >= 1");
  require(n >= 1, "n", "must be >= 1");
  require(maxiters >= 0, "maxiters", "must be >= 0");
  require(std::isfinite(omega) && omega >= 0, "omega", "must be >= 0");
  require(lr_isp > 0, "lr_isp", "must be > 0");
  require(lr_face > 0, "lr_face", "must be > 0");
  require(lr_head > 0, "lr_head", "must be > 0");
  require(lr_det > 0, "lr_det", "must be > 0");
  require(momentum >= 0 && momentum < 1, "momentum", "must lie in [0,1)");
  require(warmup_threshold >= 0 && warmup_threshold <= 1, "warmup_threshold", "must lie in [0,1]");
  require(warmup_cap >= 1, "warmup_cap", "must be >= 1");
  require(heldout_fraction > 0 && heldout_fraction < 1, "heldout_fraction", "must lie in (0,1)");
  require(face_batch >= 1, "face_batch", "must be >= 1");
  require(det_batch >= 1, "det_batch", "must be >= 1");
  require(knots >= 2, "knots", "must be >= 2");
}

TrainState::TrainState(const TrainConfig& cfg, const isp::ISPParams& init, face::ConvEmbeddingNet& f,
                       face::ProxyHead& h, det::DetectorModel& d)
    : config(cfg), isp(isp::ISPVariables::from(init)), extractor(&f), head(&h), detector(&d) {
  opt_isp = std::make_unique<optim::Adam>(isp.parameters(), cfg.lr_isp);
  opt_face = std::make_unique<optim::SGD>(f.parameters(), cfg.lr_face, cfg.momentum);
  opt_head = std::make_unique<optim::SGD>(std::vector<Var>{h.weight}, cfg.lr_head, cfg.momentum);
  opt_det = std::make_unique<optim::SGD>(d.parameters(), cfg.lr_det, cfg.momentum);
}

// ---------------------------------------------------------------- data helpers

std::pair<face::FaceDataset, face::FaceDataset> split_heldout(const face::FaceDataset& data, double fraction) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_id[data.samples[i].identity].push_back(i);
  face::FaceDataset train, held;
  for (const auto& [id, idx] : by_id) {
    std::size_t k = idx.size() >= 2 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * idx.size())))
                                    : 0;
    for (std::size_t j = 0; j < idx.size(); ++j)
      (j + k < idx.size() ? train : held).samples.push_back(data.samples[idx[j]]);
  }
  return {std::move(train), std::move(held)};
}

namespace {

class Sampler {
 public:
  Sampler(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = size;
  }
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    count = std::min(count, order_.size());
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
  Rng rng_;
};

FaceBatch make_face_batch(const face::FaceDataset& data, const face::LabelIndex& index,
                          const std::vector<std::size_t>& idx) {
  FaceBatch b;
  b.images = data.images(idx);
  for (std::size_t i : idx) b.labels.push_back(index.index(data.samples[i].identity));
  return b;
}

DetBatch make_det_batch(const std::vector<det::DetectionSample>& data, const std::vector<std::size_t>& idx) {
  DetBatch b;
  std::vector<Tensor> imgs;
  for (std::size_t i : idx) {
    imgs.push_back(data[i].image);
    b.boxes.push_back(data[i].boxes);
  }
  b.images = Tensor::stack(imgs);
  return b;
}

void guard(double value, const char* what, const TrainState& state) {
  const auto& dump = state.divergence_dump;
  if (std::isfinite(value)) return;
  std::ostringstream msg;
  msg << what << " became non-finite at round " << state.round;
  if (!state.history.empty()) {
    const auto& h = state.history.back();
    msg << " (last: ce=" << h.ce << " ns=" << h.ns << " cls=" << h.cls << " box=" << h.box << ")";
  }
  if (!dump.empty()) {
    try {
      save_checkpoint(state, dump);
      msg << "; state dumped to " << dump.string();
    } catch (const std::exception& e) {
      msg << "; state dump failed: " << e.what();
    }
  }
  throw DivergenceError(msg.str());
}

}  // namespace

// ---------------------------------------------------------------- players

WarmupResult warmup(const face::FaceDataset& train, const face::FaceDataset& heldout, face::ConvEmbeddingNet& extractor,
                    face::ProxyHead& head, const TrainConfig& config) {
  face::LabelIndex index(train.identities());
  if (index.size() != head.num_identities()) throw ValidationError("warmup: head size does not match proxy identities");
  auto fparams = extractor.parameters();
  nn::set_requires_grad(fparams, true);
  head.weight.set_requires_grad(true);
  optim::SGD opt_f(fparams, config.lr_face, config.momentum);
  optim::SGD opt_h({head.weight}, config.lr_head, config.momentum);
  Sampler sampler(train.samples.size(), derive_seed(config.seed, 11));
  const std::size_t steps = (train.samples.size() + config.face_batch - 1) / config.face_batch;
  WarmupResult res;
  double best = 0.0;
  for (int epoch = 1; epoch <= config.warmup_cap; ++epoch) {
    for (std::size_t s = 0; s < steps; ++s) {
      const auto batch = make_face_batch(train, index, sampler.next(config.face_batch));
      opt_f.zero_grad();
      opt_h.zero_grad();
      Var loss = ad::cross_entropy(head.logits(extractor.forward(ad::constant(batch.images))), batch.labels);
      if (!std::isfinite(loss.item())) throw DivergenceError("warmup loss became non-finite");
      ad::backward(loss);
      opt_f.step();
      opt_h.step();
    }
    const double acc = face::head_accuracy(extractor, head, heldout.samples.empty() ? train : heldout);
    best = std::max(best, acc);
    if (acc >= config.warmup_threshold) return {epoch, acc};
  }
  throw WarmupError("warmup did not reach proxy accuracy " + std::to_string(config.warmup_threshold) + " within " +
                        std::to_string(config.warmup_cap) + " epochs",
                    best);
}

void attacker_step(TrainState& st, const FaceBatch& batch) {
  // theta_C is frozen: the capture is evaluated as a plain function of the images.
  const Tensor captured = isp::virtual_capture(isp::ImageTensor(batch.images, isp::ColorDomain::srgb), st.params()).values;
  auto fparams = st.extractor->parameters();
  nn::set_requires_grad(fparams, true);
  st.head->weight.set_requires_grad(true);
  st.opt_face->zero_grad();
  st.opt_head->zero_grad();
  Var loss = ad::cross_entropy(st.head->logits(st.extractor->forward(ad::constant(captured))), batch.labels);
  LossRecord rec;
  rec.round = st.round;
  rec.attacker = true;
  rec.ce = loss.item();
  guard(rec.ce, "attacker loss", st);
  ad::backward(loss);
  st.opt_face->step();
  st.opt_head->step();
  st.history.push_back(rec);
}

void protector_step(TrainState& st, const FaceBatch& faces, const DetBatch& scenes, double omega) {
  auto fparams = st.extractor->parameters();
  nn::set_requires_grad(fparams, false);
  st.head->weight.set_requires_grad(false);
  auto isp_params = st.isp.parameters();
  nn::set_requires_grad(isp_params, true);
  auto dparams = st.detector->parameters();
  nn::set_requires_grad(dparams, true);

  LossRecord rec;
  rec.round = st.round;
  rec.attacker = false;

  // Privacy term: gradient of L_ns for theta_C only.
  nn::zero_grad(isp_params);
  Var captured = isp::capture(ad::constant(faces.images), st.isp);
  Var l_ns = ad::non_saturated_loss(st.head->logits(st.extractor->forward(captured)), faces.labels);
  rec.ns = l_ns.item();
  guard(rec.ns, "protector privacy loss", st);
  ad::backward(l_ns);
  std::vector<Tensor> grad;
  for (const Var& p : isp_params) grad.push_back(p.grad());

  // Utility term: shared by theta_C (weighted) and theta_P.
  nn::zero_grad(isp_params);
  st.opt_det->zero_grad();
  Var captured_scenes = isp::capture(ad::constant(scenes.images), st.isp);
  const auto dl = st.detector->loss(captured_scenes, scenes.boxes);
  rec.cls = dl.cls.item();
  rec.box = dl.box.item();
  Var l_det = dl.total();
  guard(l_det.item(), "protector detection loss", st);
  ad::backward(l_det);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const Tensor& g = isp_params[i].grad();
    for (std::size_t k = 0; k < g.numel(); ++k) grad[i][k] += omega * g[k];
  }
  st.opt_isp->step_with(grad);
  st.opt_det->step();
  st.isp.project();
  st.last_isp_gradient = std::move(grad);
  nn::set_requires_grad(fparams, true);
  st.head->weight.set_requires_grad(true);
  st.history.push_back(rec);
}

// ---------------------------------------------------------------- outer loop

RunResult run(const TrainConfig& config, const face::FaceDataset& face_data,
              const std::vector<det::DetectionSample>& det_data, face::ConvEmbeddingNet& extractor,
              face::ProxyHead& head, det::DetectorModel& detector, const RunOptions& options) {
  config.validate();
  if (face_data.samples.empty() || det_data.empty()) throw ProtocolError("run: empty face or detection data");
  auto [train, held] = split_heldout(face_data, config.heldout_fraction);
  face::LabelIndex index(face_data.identities());

  RunResult result;
  if (!options.skip_warmup) result.warmup = warmup(train, held, extractor, head, config);

  TrainState st(config, isp::ISPParams::identity(config.knots), extractor, head, detector);
  if (!options.resume.empty()) load_checkpoint(st, options.resume);
  st.divergence_dump = options.divergence_dump;

  // Independent streams for attacker and protector face batches.
  Sampler attacker_faces(train.samples.size(), derive_seed(config.seed, 21));
  Sampler protector_faces(train.samples.size(), derive_seed(config.seed, 22));
  Sampler scenes(det_data.size(), derive_seed(config.seed, 23));
  // Fast-forward samplers so a resumed run draws the same batches.
  for (int r = 0; r < st.round; ++r) {
    if (config.mode == Mode::full)
      for (int j = 0; j < config.m; ++j) attacker_faces.next(config.face_batch);
    for (int j = 0; j < config.n; ++j) {
      protector_faces.next(config.face_batch);
      scenes.next(config.det_batch);
    }
  }

  for (; st.round < config.maxiters; ++st.round) {
    if (config.mode == Mode::full)
      for (int j = 0; j < config.m; ++j) {
        attacker_step(st, make_face_batch(train, index, attacker_faces.next(config.face_batch)));
        st.history.back().step = j;
      }
    for (int j = 0; j < config.n; ++j) {
      const auto fb = make_face_batch(train, index, protector_faces.next(config.face_batch));
      const auto db = make_det_batch(det_data, scenes.next(config.det_batch));
      protector_step(st, fb, db, config.omega);
      st.history.back().step = (config.mode == Mode::full ? config.m : 0) + j;
    }
    if (!options.checkpoint.empty() && (st.round + 1) % options.checkpoint_every == 0) {
      ++st.round;
      save_checkpoint(st, options.checkpoint);
      --st.round;
    }
  }
  result.params = st.params();
  result.history = std::move(st.history);
  return result;
}

// ---------------------------------------------------------------- persistence

void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  auto cell = [&](double v) {
    if (std::isfinite(v)) out << v;
  };
  out << "round,step,L_ce,L_ns,L_cls,L_box\n";
  for (const auto& r : history) {
    out << r.round << ',' << r.step << ',';
    cell(r.ce);
    out << ',';
    cell(r.ns);
    out << ',';
    cell(r.cls);
    out << ',';
    cell(r.box);
    out << '\n';
  }
}

std::string config_to_json(const TrainConfig& c) {
  json j{{"m", c.m},
         {"n", c.n},
         {"maxiters", c.maxiters},
         {"omega", c.omega},
         {"lr_isp", c.lr_isp},
         {"lr_face", c.lr_face},
         {"lr_head", c.lr_head},
         {"lr_det", c.lr_det},
         {"momentum", c.momentum},
         {"warmup_threshold", c.warmup_threshold},
         {"warmup_cap", c.warmup_cap},
         {"heldout_fraction", c.heldout_fraction},
         {"face_batch", c.face_batch},
         {"det_batch", c.det_batch},
         {"knots", c.knots},
         {"seed", c.seed},
         {"mode", to_string(c.mode)}};
  return j.dump(2);
}

namespace {

TrainConfig config_from(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "m") c.m = value.get<int>();
      else if (key == "n") c.n = value.get<int>();
      else if (key == "maxiters") c.maxiters = value.get<int>();
      else if (key == "omega") c.omega = value.get<double>();
      else if (key == "lr_isp") c.lr_isp = value.get<double>();
      else if (key == "lr_face") c.lr_face = value.get<double>();
      else if (key == "lr_head") c.lr_head = value.get<double>();
      else if (key == "lr_det") c.lr_det = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "warmup_threshold") c.warmup_threshold = value.get<double>();
      else if (key == "warmup_cap") c.warmup_cap = value.get<int>();
      else if (key == "heldout_fraction") c.heldout_fraction = value.get<double>();
      else if (key == "face_batch") c.face_batch = value.get<int>();
      else if (key == "det_batch") c.det_batch = value.get<int>();
      else if (key == "knots") c.knots = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "mode") {
        const auto s = value.get<std::string>();
        if (s == "full") c.mode = Mode::full;
        else if (s == "protector_only") c.mode = Mode::protector_only;
        else throw ParseError(key, "expected full or protector_only");
      } else {
        throw ParseError(key, "unknown field");
      }
    } catch (const json::exception& e) {
      throw ParseError(key, e.what());
    }
  }
  return c;
}

}  // namespace

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("byte " + std::to_string(e.byte), e.what());
  }
  return config_from(j);
}

void save_checkpoint(const TrainState& st, const std::filesystem::path& path) {
  json j;
  j["config"] = json::parse(config_to_json(st.config));
  j["round"] = st.round;
  j["isp"] = json::parse(isp::params_to_json(st.params()));
  j["extractor"] = nn::flatten_values(st.extractor->parameters());
  j["head"] = nn::flatten_values({st.head->weight});
  j["detector"] = nn::flatten_values(st.detector->parameters());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp);
    out << j.dump();
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(TrainState& st, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("byte " + std::to_string(e.byte), e.what());
  }
  for (const char* key : {"round", "isp", "extractor", "head", "detector"})
    if (!j.contains(key)) throw ParseError(key, "missing field");
  st.round = j["round"].get<int>();
  st.isp = isp::ISPVariables::from(isp::params_from_json(j["isp"].dump()));
  st.opt_isp = std::make_unique<optim::Adam>(st.isp.parameters(), st.config.lr_isp);
  nn::load_values(st.extractor->parameters(), j["extractor"].get<std::vector<std::vector<double>>>(), "extractor");
  nn::load_values({st.head->weight}, j["head"].get<std::vector<std::vector<double>>>(), "head");
  nn::load_values(st.detector->parameters(), j["detector"].get<std::vector<std::vector<double>>>(), "detector");
}

}  // namespace privisp::adv
