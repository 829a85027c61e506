#include "privisp/workbench.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "privisp/error.hpp"
#include "privisp/evaluation.hpp"
#include "privisp/image_io.hpp"
#include "privisp/isp.hpp"

#ifndef PRIVISP_VERSION
#define PRIVISP_VERSION "0.0.0"
#endif

namespace privisp::wb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct KindName {
  ExperimentKind kind;
  const char* name;
};

constexpr KindName kKinds[] = {
    {ExperimentKind::simulate, "simulate"},         {ExperimentKind::train_isp, "train-isp"},
    {ExperimentKind::train_enhancer, "train-enhancer"}, {ExperimentKind::eval_afr, "eval-afr"},
    {ExperimentKind::eval_utility, "eval-utility"}, {ExperimentKind::eval_iqa, "eval-iqa"},
    {ExperimentKind::attack, "attack"},             {ExperimentKind::sweep, "sweep"},
    {ExperimentKind::export_params, "export-params"}, {ExperimentKind::preliminary, "preliminary"},
};

}  // namespace

const char* to_string(ExperimentKind kind) {
  for (const auto& k : kKinds)
    if (k.kind == kind) return k.name;
  return "unknown";
}

ExperimentKind kind_from_string(const std::string& text) {
  for (const auto& k : kKinds)
    if (text == k.name) return k.kind;
  throw ValidationError("kind: unknown experiment kind '" + text + "'");
}

const std::vector<ExperimentKind>& all_kinds() {
  static const std::vector<ExperimentKind> kinds = [] {
    std::vector<ExperimentKind> v;
    for (const auto& k : kKinds) v.push_back(k.kind);
    return v;
  }();
  return kinds;
}

// ---------------------------------------------------------------- config

namespace {

DataConfig default_data() {
  DataConfig d;
  d.faces.synthetic = synth::FaceCorpusSpec{10, 6, 1000, 32, 1};
  d.train_faces.synthetic = synth::FaceCorpusSpec{300, 4, 0, 32, 1};
  d.proxy_faces.synthetic = synth::FaceCorpusSpec{20, 50, 2000, 32, 1};
  d.scenes.synthetic = synth::SceneCorpusSpec{300, 64, 3, 50, 2};
  d.test_scenes.synthetic = synth::SceneCorpusSpec{100, 64, 3, 50, 3};
  return d;
}

json face_spec_json(const synth::FaceCorpusSpec& s) {
  return {{"identities", s.identities},
          {"images_per_identity", s.images_per_identity},
          {"first_identity", s.first_identity},
          {"size", s.size},
          {"seed", s.seed}};
}

json scene_spec_json(const synth::SceneCorpusSpec& s) {
  return {{"scenes", s.scenes},
          {"size", s.size},
          {"max_persons", s.max_persons},
          {"head_identities", s.head_identities},
          {"seed", s.seed}};
}

json source_json(const FaceSource& s) {
  return {{"root", s.root},
          {"manifest", s.manifest},
          {"synthetic", s.synthetic ? face_spec_json(*s.synthetic) : json(nullptr)}};
}

json source_json(const SceneSource& s) {
  return {{"manifest", s.manifest}, {"synthetic", s.synthetic ? scene_spec_json(*s.synthetic) : json(nullptr)}};
}

json retrain_json(const attack::RetrainConfig& r) {
  return {{"mode", r.mode == attack::RetrainMode::finetune ? "finetune" : "scratch"},
          {"loss", r.loss == face::LossKind::softmax ? "softmax" : "arcface"},
          {"epochs", r.epochs},
          {"lr", r.lr},
          {"decay_epoch", r.decay_epoch},
          {"lr_decay", r.lr_decay},
          {"weight_decay", r.weight_decay},
          {"momentum", r.momentum},
          {"batch_size", r.batch_size},
          {"arc_scale", r.arc_scale},
          {"arc_margin", r.arc_margin},
          {"protected_gallery", r.protected_gallery},
          {"runs", r.runs},
          {"seed", r.seed}};
}

json config_json(const ExperimentConfig& c) {
  json j;
  j["kind"] = to_string(c.kind);
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  j["out"] = c.out;
  j["params"] = c.params;
  j["checkpoint"] = c.checkpoint;
  j["runs"] = c.runs;
  j["export_features"] = c.export_features;
  j["data"] = {{"faces", source_json(c.data.faces)},
               {"train_faces", source_json(c.data.train_faces)},
               {"proxy_faces", source_json(c.data.proxy_faces)},
               {"scenes", source_json(c.data.scenes)},
               {"test_scenes", source_json(c.data.test_scenes)},
               {"reference_images", c.data.reference_images},
               {"test_images", c.data.test_images}};
  const auto& m = c.models;
  j["models"] = {{"extractor", m.extractor},
                 {"detector", m.detector},
                 {"enhancer", m.enhancer},
                 {"feature_dim", m.feature_dim},
                 {"extractor_width", m.extractor_width},
                 {"extractor_epochs", m.extractor_epochs},
                 {"extractor_lr", m.extractor_lr},
                 {"extractor_decay_epoch", m.extractor_decay_epoch},
                 {"detector_width", m.detector_width},
                 {"detector_epochs", m.detector_epochs},
                 {"detector_lr", m.detector_lr},
                 {"enhancer_width", m.enhancer_width}};
  j["train"] = json::parse(adv::config_to_json(c.train));
  j["retrain"] = retrain_json(c.retrain);
  j["enhancer"] = {{"epochs", c.enhancer.epochs},
                   {"batch_size", c.enhancer.batch_size},
                   {"lr", c.enhancer.lr},
                   {"weight_decay", c.enhancer.weight_decay},
                   {"seed", c.enhancer.seed}};
  json defocus = json::array(), params = json::array();
  for (const auto& [k, s] : c.sweep.defocus) defocus.push_back({k, s});
  for (const auto& [label, path] : c.sweep.params) params.push_back({label, path});
  j["sweep"] = {{"low_resolution", c.sweep.low_resolution}, {"defocus", defocus}, {"params", params}};
  return j;
}

// Reads typed members of one JSON object, reporting errors by key path.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParseError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const char* key, T& dst) const {
    if (!has(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParseError(key_path(key), e.what());
    }
  }

  Reader child(const char* key) const { return Reader(j_.at(key), key_path(key)); }
  const json& raw(const char* key) const { return j_.at(key); }

 private:
  const json& j_;
  std::string path_;
};

synth::FaceCorpusSpec read_face_spec(const Reader& r, synth::FaceCorpusSpec s) {
  r.get("identities", s.identities);
  r.get("images_per_identity", s.images_per_identity);
  r.get("first_identity", s.first_identity);
  r.get("size", s.size);
  r.get("seed", s.seed);
  return s;
}

synth::SceneCorpusSpec read_scene_spec(const Reader& r, synth::SceneCorpusSpec s) {
  r.get("scenes", s.scenes);
  r.get("size", s.size);
  r.get("max_persons", s.max_persons);
  r.get("head_identities", s.head_identities);
  r.get("seed", s.seed);
  return s;
}

// A source given as root or manifest replaces the synthetic default.
void read_source(const Reader& parent, const char* key, FaceSource& s) {
  if (!parent.has(key)) return;
  const Reader r = parent.child(key);
  const auto fallback = s.synthetic.value_or(synth::FaceCorpusSpec{});
  if (r.has("root") || r.has("manifest")) s.synthetic.reset();
  r.get("root", s.root);
  r.get("manifest", s.manifest);
  if (r.has("synthetic")) s.synthetic = read_face_spec(r.child("synthetic"), fallback);
}

void read_source(const Reader& parent, const char* key, SceneSource& s) {
  if (!parent.has(key)) return;
  const Reader r = parent.child(key);
  const auto fallback = s.synthetic.value_or(synth::SceneCorpusSpec{});
  if (r.has("manifest")) s.synthetic.reset();
  r.get("manifest", s.manifest);
  if (r.has("synthetic")) s.synthetic = read_scene_spec(r.child("synthetic"), fallback);
}

void apply_override(json& j, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + text + "': expected key.path=value");
  const std::string key = text.substr(0, eq), value = text.substr(eq + 1);
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  json v = json::parse(value, nullptr, false);
  (*node)[parts.back()] = v.is_discarded() ? json(value) : v;
}

// Keys present in `given` but absent from the resolved structure are unknown.
void check_unknown(const json& given, const json& resolved, const std::string& path) {
  for (const auto& [key, value] : given.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!resolved.is_object() || !resolved.contains(key)) throw ParseError(p, "unknown key");
    if (value.is_object() && resolved[key].is_object()) check_unknown(value, resolved[key], p);
  }
}

void log_defaults(const json& given, const json& resolved, const std::string& path, const Log& log) {
  for (const auto& [key, value] : resolved.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    const bool present = given.is_object() && given.contains(key);
    if (value.is_object() && (!present || given[key].is_object())) {
      log_defaults(present ? given[key] : json::object(), value, p, log);
    } else if (!present) {
      log("default " + p + " = " + value.dump());
    }
  }
}

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ValidationError(field + ": " + why);
}

void validate(const ExperimentConfig& c) {
  require(c.seed.has_value(), "seed", "required");
  require(!c.out.empty(), "out", "must not be empty");
  require(c.runs >= 1, "runs", "must be >= 1");
  try {
    c.train.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("train.") + e.what());
  }
  try {
    c.retrain.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("retrain.") + e.what());
  }
  require(c.enhancer.epochs >= 0, "enhancer.epochs", "must be >= 0");
  require(c.enhancer.batch_size >= 1, "enhancer.batch_size", "must be >= 1");
  require(c.enhancer.lr > 0, "enhancer.lr", "must be > 0");
  require(c.enhancer.weight_decay >= 0, "enhancer.weight_decay", "must be >= 0");
  const auto& m = c.models;
  require(m.feature_dim >= 1, "models.feature_dim", "must be >= 1");
  require(m.extractor_width >= 1, "models.extractor_width", "must be >= 1");
  require(m.extractor_epochs >= 0, "models.extractor_epochs", "must be >= 0");
  require(m.extractor_lr > 0, "models.extractor_lr", "must be > 0");
  require(m.detector_width >= 1, "models.detector_width", "must be >= 1");
  require(m.detector_epochs >= 0, "models.detector_epochs", "must be >= 0");
  require(m.detector_lr > 0, "models.detector_lr", "must be > 0");
  require(m.enhancer_width >= 1, "models.enhancer_width", "must be >= 1");
  for (int f : c.sweep.low_resolution) require(f >= 1, "sweep.low_resolution", "factors must be >= 1");
  for (const auto& [k, s] : c.sweep.defocus) {
    require(k >= 1 && k % 2 == 1, "sweep.defocus", "kernel sizes must be odd");
    require(s > 0, "sweep.defocus", "sigma must be > 0");
  }
  auto face_spec = [](const FaceSource& s, const std::string& name) {
    if (!s.synthetic) {
      require(!s.root.empty() || !s.manifest.empty(), name, "needs root, manifest or synthetic");
      return;
    }
    require(s.synthetic->identities >= 1, name + ".synthetic.identities", "must be >= 1");
    require(s.synthetic->images_per_identity >= 1, name + ".synthetic.images_per_identity", "must be >= 1");
    require(s.synthetic->size >= 8, name + ".synthetic.size", "must be >= 8");
  };
  face_spec(c.data.faces, "data.faces");
  face_spec(c.data.train_faces, "data.train_faces");
  face_spec(c.data.proxy_faces, "data.proxy_faces");
  for (const auto& [s, name] : {std::pair{&c.data.scenes, "data.scenes"}, {&c.data.test_scenes, "data.test_scenes"}}) {
    if (!s->synthetic) {
      require(!s->manifest.empty(), name, "needs manifest or synthetic");
      continue;
    }
    require(s->synthetic->scenes >= 1, std::string(name) + ".synthetic.scenes", "must be >= 1");
    require(s->synthetic->size >= 16, std::string(name) + ".synthetic.size", "must be >= 16");
  }
  using K = ExperimentKind;
  const K k = c.kind;
  if (k == K::simulate || k == K::train_enhancer || k == K::eval_afr || k == K::eval_utility || k == K::attack)
    require(!c.params.empty(), "params", std::string("required for ") + to_string(k));
  if (k == K::export_params) require(!c.params.empty() || !c.checkpoint.empty(), "params", "or checkpoint required");
  if (k == K::eval_iqa) {
    require(!c.data.reference_images.empty(), "data.reference_images", "required for eval-iqa");
    require(!c.data.test_images.empty() || !c.params.empty(), "data.test_images", "or params required for eval-iqa");
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides, const Log& log) {
  json given;
  try {
    given = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("byte " + std::to_string(e.byte), e.what());
  }
  if (!given.is_object()) throw ParseError("<root>", "expected an object");
  for (const auto& o : overrides) apply_override(given, o);

  ExperimentConfig c;
  c.data = default_data();
  const Reader r(given, "");
  std::string kind;
  r.get("kind", kind);
  if (!kind.empty()) c.kind = kind_from_string(kind);
  if (r.has("seed")) {
    std::uint64_t s = 0;
    r.get("seed", s);
    c.seed = s;
  }
  r.get("out", c.out);
  r.get("params", c.params);
  r.get("checkpoint", c.checkpoint);
  r.get("runs", c.runs);
  r.get("export_features", c.export_features);

  if (r.has("data")) {
    const Reader d = r.child("data");
    read_source(d, "faces", c.data.faces);
    read_source(d, "train_faces", c.data.train_faces);
    read_source(d, "proxy_faces", c.data.proxy_faces);
    read_source(d, "scenes", c.data.scenes);
    read_source(d, "test_scenes", c.data.test_scenes);
    d.get("reference_images", c.data.reference_images);
    d.get("test_images", c.data.test_images);
  }
  if (r.has("models")) {
    const Reader m = r.child("models");
    auto& o = c.models;
    m.get("extractor", o.extractor);
    m.get("detector", o.detector);
    m.get("enhancer", o.enhancer);
    m.get("feature_dim", o.feature_dim);
    m.get("extractor_width", o.extractor_width);
    m.get("extractor_epochs", o.extractor_epochs);
    m.get("extractor_lr", o.extractor_lr);
    m.get("extractor_decay_epoch", o.extractor_decay_epoch);
    m.get("detector_width", o.detector_width);
    m.get("detector_epochs", o.detector_epochs);
    m.get("detector_lr", o.detector_lr);
    m.get("enhancer_width", o.enhancer_width);
  }
  if (r.has("train")) {
    try {
      c.train = adv::config_from_json(r.raw("train").dump());
    } catch (const ParseError& e) {
      throw ParseError("train." + e.location(), e.what());
    }
  }
  if (!(r.has("train") && r.child("train").has("seed")) && c.seed) c.train.seed = *c.seed;
  if (r.has("retrain")) {
    const Reader t = r.child("retrain");
    auto& o = c.retrain;
    std::string mode, loss;
    t.get("mode", mode);
    t.get("loss", loss);
    if (!mode.empty()) {
      if (mode == "finetune") o.mode = attack::RetrainMode::finetune;
      else if (mode == "scratch") o.mode = attack::RetrainMode::scratch;
      else throw ParseError("retrain.mode", "expected finetune or scratch");
    }
    if (!loss.empty()) {
      if (loss == "softmax") o.loss = face::LossKind::softmax;
      else if (loss == "arcface") o.loss = face::LossKind::arcface;
      else throw ParseError("retrain.loss", "expected softmax or arcface");
    }
    t.get("epochs", o.epochs);
    t.get("lr", o.lr);
    t.get("decay_epoch", o.decay_epoch);
    t.get("lr_decay", o.lr_decay);
    t.get("weight_decay", o.weight_decay);
    t.get("momentum", o.momentum);
    t.get("batch_size", o.batch_size);
    t.get("arc_scale", o.arc_scale);
    t.get("arc_margin", o.arc_margin);
    t.get("protected_gallery", o.protected_gallery);
    t.get("runs", o.runs);
    t.get("seed", o.seed);
  }
  if (!(r.has("retrain") && r.child("retrain").has("seed")) && c.seed) c.retrain.seed = *c.seed;
  if (r.has("enhancer")) {
    const Reader e = r.child("enhancer");
    e.get("epochs", c.enhancer.epochs);
    e.get("batch_size", c.enhancer.batch_size);
    e.get("lr", c.enhancer.lr);
    e.get("weight_decay", c.enhancer.weight_decay);
    e.get("seed", c.enhancer.seed);
  }
  if (!(r.has("enhancer") && r.child("enhancer").has("seed")) && c.seed) c.enhancer.seed = *c.seed;
  if (r.has("sweep")) {
    const Reader s = r.child("sweep");
    s.get("low_resolution", c.sweep.low_resolution);
    s.get("defocus", c.sweep.defocus);
    s.get("params", c.sweep.params);
  }

  const json resolved = config_json(c);
  check_unknown(given, resolved, "");
  validate(c);
  if (log) log_defaults(given, resolved, "", log);
  return c;
}

void check_paths(const ExperimentConfig& c) {
  auto exists = [](const std::string& p, const std::string& field) {
    if (!p.empty() && !fs::exists(p)) throw ValidationError(field + ": path does not exist: " + p);
  };
  exists(c.params, "params");
  exists(c.checkpoint, "checkpoint");
  exists(c.models.extractor, "models.extractor");
  exists(c.models.detector, "models.detector");
  exists(c.models.enhancer, "models.enhancer");
  for (const auto& [s, name] : {std::pair{&c.data.faces, "data.faces"},
                                {&c.data.train_faces, "data.train_faces"},
                                {&c.data.proxy_faces, "data.proxy_faces"}}) {
    exists(s->root, std::string(name) + ".root");
    exists(s->manifest, std::string(name) + ".manifest");
  }
  exists(c.data.scenes.manifest, "data.scenes.manifest");
  exists(c.data.test_scenes.manifest, "data.test_scenes.manifest");
  exists(c.data.reference_images, "data.reference_images");
  exists(c.data.test_images, "data.test_images");
  for (const auto& [label, path] : c.sweep.params) exists(path, "sweep.params." + label);
}

ExperimentConfig validate_config(const fs::path& path, const std::vector<std::string>& overrides, const Log& log) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = parse_config(ss.str(), overrides, log);
  check_paths(c);
  return c;
}

std::string to_json(const ExperimentConfig& config) { return config_json(config).dump(2); }

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string config_hash(const ExperimentConfig& config) { return hex16(fnv1a(config_json(config).dump())); }

// ---------------------------------------------------------------- datasets

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out)
    if (!c.empty() && c.back() == '\r') c.pop_back();
  return out;
}

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

bool all_numeric(const std::set<std::string>& names) {
  for (const auto& n : names) {
    if (n.empty() || n.size() > 9 || !std::all_of(n.begin(), n.end(), [](unsigned char ch) { return std::isdigit(ch); }))
      return false;
  }
  return true;
}

face::FaceDataset assemble(std::vector<std::pair<std::string, std::string>> entries, IngestionReport* report) {
  std::set<std::string> names;
  for (const auto& e : entries) names.insert(e.second);
  const bool numeric = all_numeric(names);
  std::map<std::string, int> label;
  int next = 0;
  for (const auto& n : names) label[n] = numeric ? std::stoi(n) : next++;
  std::sort(entries.begin(), entries.end(), [&](const auto& a, const auto& b) {
    return std::pair(label[a.second], a.first) < std::pair(label[b.second], b.first);
  });
  IngestionReport local;
  IngestionReport& rep = report ? *report : local;
  rep.identity_names.assign(names.begin(), names.end());
  face::FaceDataset data;
  std::map<std::string, int> counts;
  std::vector<int> shape;
  for (const auto& [path, name] : entries) {
    Tensor img;
    try {
      img = io::read_image(path);
    } catch (const Error& e) {
      rep.skipped.emplace_back(path, e.what());
      continue;
    }
    if (shape.empty()) shape = img.shape();
    if (img.shape() != shape) {
      rep.skipped.emplace_back(path, "size " + img.shape_string() + " differs from the first image");
      continue;
    }
    data.samples.push_back({std::move(img), label[name], path});
    ++counts[name];
  }
  for (const auto& n : names)
    if (counts[n] < 2) rep.flagged.push_back(n);
  return data;
}

}  // namespace

face::FaceDataset ingest_face_dataset(const fs::path& source, IngestionReport* report) {
  std::vector<std::pair<std::string, std::string>> entries;
  if (fs::is_directory(source)) {
    for (const auto& dir : fs::directory_iterator(source)) {
      if (!dir.is_directory()) continue;
      for (const auto& f : fs::directory_iterator(dir.path()))
        if (f.is_regular_file() && is_image(f.path()))
          entries.emplace_back(fs::weakly_canonical(f.path()).string(), dir.path().filename().string());
    }
  } else {
    std::ifstream in(source);
    if (!in) throw Error("cannot read face manifest " + source.string());
    std::string line;
    std::getline(in, line);
    const auto header = split_csv(line);
    if (header.size() < 2 || header[0] != "path" || header[1] != "identity")
      throw ParseError("line 1", "face manifest header must be path,identity");
    int row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (line.empty()) continue;
      const auto cells = split_csv(line);
      if (cells.size() < 2 || cells[1].empty()) throw ParseError("line " + std::to_string(row), "expected path,identity");
      fs::path p = cells[0];
      if (p.is_relative()) p = source.parent_path() / p;
      entries.emplace_back(fs::weakly_canonical(p).string(), cells[1]);
    }
  }
  return assemble(std::move(entries), report);
}

namespace {

det::Boxes parse_boxes(const std::string& cell, const std::string& where) {
  det::Boxes boxes;
  std::stringstream ss(cell);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.find_first_not_of(' ') == std::string::npos) continue;
    std::stringstream is(item);
    det::BoundingBox b;
    if (!(is >> b.cx >> b.cy >> b.w >> b.h)) throw ParseError(where, "box must be 'cx cy w h'");
    b.validate();
    boxes.push_back(b);
  }
  return boxes;
}

std::string format_boxes(const det::Boxes& boxes) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (i) out << ';';
    out << boxes[i].cx << ' ' << boxes[i].cy << ' ' << boxes[i].w << ' ' << boxes[i].h;
  }
  return out.str();
}

}  // namespace

std::vector<det::DetectionSample> ingest_detection_dataset(const fs::path& manifest, IngestionReport* report) {
  std::ifstream in(manifest);
  if (!in) throw Error("cannot read detection manifest " + manifest.string());
  IngestionReport local;
  IngestionReport& rep = report ? *report : local;
  std::string line;
  std::getline(in, line);
  const auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "path" || header[1] != "boxes")
    throw ParseError("line 1", "detection manifest header must be path,boxes[,faces]");
  std::vector<det::DetectionSample> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const std::string where = "line " + std::to_string(row);
    if (cells.size() < 2) throw ParseError(where, "expected path,boxes");
    fs::path p = cells[0];
    if (p.is_relative()) p = manifest.parent_path() / p;
    det::DetectionSample s;
    s.source = fs::weakly_canonical(p).string();
    s.boxes = parse_boxes(cells[1], where);
    if (cells.size() > 2) s.faces = parse_boxes(cells[2], where);
    try {
      s.image = io::read_image(p);
    } catch (const Error& e) {
      rep.skipped.emplace_back(s.source, e.what());
      continue;
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_face_dataset(const face::FaceDataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error("cannot write " + (dir / "manifest.csv").string());
  manifest << "path,identity\n";
  std::map<int, int> count;
  for (const auto& s : data.samples) {
    const std::string id = std::to_string(s.identity);
    const fs::path rel = fs::path(id) / (std::to_string(count[s.identity]++) + ".png");
    fs::create_directories(dir / id);
    io::write_image(s.image, dir / rel);
    manifest << rel.string() << ',' << id << '\n';
  }
}

void write_detection_dataset(const std::vector<det::DetectionSample>& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw Error("cannot write " + (dir / "manifest.csv").string());
  manifest << "path,boxes,faces\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name = std::to_string(i) + ".png";
    io::write_image(data[i].image, dir / name);
    manifest << name << ',' << format_boxes(data[i].boxes) << ',' << format_boxes(data[i].faces) << '\n';
  }
}

// ---------------------------------------------------------------- models

namespace {

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp);
    out << j.dump();
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("byte " + std::to_string(e.byte), e.what());
  }
}

json model_header(const json& j, const char* kind, const fs::path& path) {
  if (!j.contains("kind") || j["kind"] != kind)
    throw ParseError("kind", path.string() + " does not hold a " + std::string(kind) + " model");
  return j;
}

}  // namespace

void save_model(const face::ConvEmbeddingNet& net, const fs::path& path) {
  write_json({{"kind", "conv_embedding"},
              {"input_size", net.input_size()},
              {"feature_dim", net.feature_dim()},
              {"width", net.width()},
              {"values", nn::flatten_values(net.parameters())}},
             path);
}

face::ConvEmbeddingNet load_extractor(const fs::path& path) {
  const json j = model_header(read_json(path), "conv_embedding", path);
  Rng rng(0);
  face::ConvEmbeddingNet net(j.at("input_size").get<int>(), j.at("feature_dim").get<int>(), rng,
                             j.at("width").get<int>());
  nn::load_values(net.parameters(), j.at("values").get<std::vector<std::vector<double>>>(), "extractor");
  return net;
}

void save_model(const det::CenterDetector& net, const fs::path& path) {
  write_json({{"kind", "center_detector"}, {"width", net.width()}, {"values", nn::flatten_values(net.parameters())}},
             path);
}

det::CenterDetector load_detector(const fs::path& path) {
  const json j = model_header(read_json(path), "center_detector", path);
  Rng rng(0);
  det::CenterDetector net(rng, j.at("width").get<int>());
  nn::load_values(net.parameters(), j.at("values").get<std::vector<std::vector<double>>>(), "detector");
  return net;
}

void save_model(const enh::UNet& net, const fs::path& path) {
  write_json({{"kind", "unet"}, {"width", net.width()}, {"values", nn::flatten_values(net.parameters())}}, path);
}

enh::UNet load_enhancer(const fs::path& path) {
  const json j = model_header(read_json(path), "unet", path);
  Rng rng(0);
  enh::UNet net(rng, j.at("width").get<int>());
  nn::load_values(net.parameters(), j.at("values").get<std::vector<std::vector<double>>>(), "enhancer");
  return net;
}

// ---------------------------------------------------------------- results

namespace {

constexpr const char* kResultsHeader = "experiment_id,timestamp,metric,value,method,dataset,model";

std::string clean(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void append_results(const fs::path& path, const std::vector<ResultsRow>& rows) {
  for (const auto& r : rows)
    if (!std::isfinite(r.value)) throw ValidationError("results: metric " + r.metric + " is not finite");
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  if (fresh) out << kResultsHeader << '\n';
  for (const auto& r : rows)
    out << clean(r.experiment_id) << ',' << clean(r.timestamp) << ',' << clean(r.metric) << ',' << r.value << ','
        << clean(r.method) << ',' << clean(r.dataset) << ',' << clean(r.model) << '\n';
}

std::vector<ResultsRow> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kResultsHeader) throw ParseError("line 1", "unexpected results header");
  std::vector<ResultsRow> rows;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto c = split_csv(line);
    if (c.size() != 7) throw ParseError("line " + std::to_string(row), "expected 7 columns");
    rows.push_back({c[0], c[1], c[2], std::stod(c[3]), c[4], c[5], c[6]});
  }
  return rows;
}

bool same_results(const std::vector<ResultsRow>& a, const std::vector<ResultsRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a[i];
    const auto& y = b[i];
    if (x.experiment_id != y.experiment_id || x.metric != y.metric || x.value != y.value || x.method != y.method ||
        x.dataset != y.dataset || x.model != y.model)
      return false;
  }
  return true;
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw LockError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------- experiments

namespace {

struct Context {
  const ExperimentConfig& cfg;
  fs::path out;
  std::string id;
  std::string timestamp;
  Log log;
  std::vector<ResultsRow> rows;

  void say(const std::string& s) const {
    if (log) log(s);
  }

  void add(const std::string& metric, double value, const std::string& method, const std::string& dataset,
           const std::string& model) {
    rows.push_back({id, timestamp, metric, value, method, dataset, model});
  }

  std::uint64_t seed(std::uint64_t tag) const { return derive_seed(*cfg.seed, tag); }

  static std::string name_of(const FaceSource& s) {
    if (!s.root.empty()) return fs::path(s.root).filename().string();
    if (!s.manifest.empty()) return fs::path(s.manifest).stem().string();
    return "synthetic";
  }
  static std::string name_of(const SceneSource& s) {
    return s.manifest.empty() ? "synthetic-scenes" : fs::path(s.manifest).stem().string();
  }

  face::FaceDataset faces(const FaceSource& s) const {
    if (s.synthetic) return synth::face_corpus(*s.synthetic);
    IngestionReport rep;
    auto data = ingest_face_dataset(s.root.empty() ? s.manifest : s.root, &rep);
    for (const auto& [path, why] : rep.skipped) say("skipped " + path + ": " + why);
    for (const auto& n : rep.flagged) say("identity " + n + " has fewer than two images");
    return data;
  }

  std::vector<det::DetectionSample> scenes(const SceneSource& s) const {
    if (s.synthetic) return synth::scene_corpus(*s.synthetic);
    IngestionReport rep;
    auto data = ingest_detection_dataset(s.manifest, &rep);
    for (const auto& [path, why] : rep.skipped) say("skipped " + path + ": " + why);
    return data;
  }

  std::string extractor_name() const { return cfg.models.extractor.empty() ? "builtin-extractor" : cfg.models.extractor; }
  std::string detector_name() const { return cfg.models.detector.empty() ? "builtin-detector" : cfg.models.detector; }

  // Built-in models are cached under out/models keyed by what determines them.
  face::ConvEmbeddingNet extractor() const {
    if (!cfg.models.extractor.empty()) return load_extractor(cfg.models.extractor);
    const auto& m = cfg.models;
    json key = {{"data", source_json(cfg.data.train_faces)}, {"dim", m.feature_dim}, {"width", m.extractor_width},
                {"epochs", m.extractor_epochs}, {"lr", m.extractor_lr}, {"decay", m.extractor_decay_epoch},
                {"seed", *cfg.seed}};
    const fs::path cache = out / "models" / ("extractor-" + hex16(fnv1a(key.dump())) + ".json");
    if (fs::exists(cache)) return load_extractor(cache);
    say("training built-in extractor");
    const auto data = faces(cfg.data.train_faces);
    if (data.samples.empty()) throw ProtocolError("train_faces is empty");
    Rng rng(seed(51));
    face::ConvEmbeddingNet net(data.samples[0].image.dim(2), m.feature_dim, rng, m.extractor_width);
    face::ProxyHead head(m.feature_dim, static_cast<int>(data.identities().size()), rng);
    face::FitOptions fo;
    fo.epochs = m.extractor_epochs;
    fo.lr = m.extractor_lr;
    fo.decay_epoch = m.extractor_decay_epoch;
    fo.seed = seed(52);
    face::fit_identity_model(net, head, data, fo);
    save_model(net, cache);
    return net;
  }

  det::CenterDetector detector() const {
    if (!cfg.models.detector.empty()) return load_detector(cfg.models.detector);
    const auto& m = cfg.models;
    json key = {{"data", source_json(cfg.data.scenes)}, {"width", m.detector_width}, {"epochs", m.detector_epochs},
                {"lr", m.detector_lr}, {"seed", *cfg.seed}};
    const fs::path cache = out / "models" / ("detector-" + hex16(fnv1a(key.dump())) + ".json");
    if (fs::exists(cache)) return load_detector(cache);
    say("training built-in detector");
    Rng rng(seed(53));
    det::CenterDetector net(rng, m.detector_width);
    det::DetectorFitOptions fo;
    fo.epochs = m.detector_epochs;
    fo.lr = m.detector_lr;
    fo.seed = seed(54);
    det::fit_detector(net, scenes(cfg.data.scenes), fo);
    save_model(net, cache);
    return net;
  }

  isp::ISPParams params() const { return isp::import_params(cfg.params); }
};

face::ImageFn capture_fn(const isp::ISPParams& p) {
  return [p](const Tensor& x) { return isp::virtual_capture(isp::ImageTensor(x, isp::ColorDomain::srgb), p).values; };
}

void add_protocol(Context& ctx, const std::string& method, const face::ProtocolResult& r, const std::string& dataset) {
  ctx.add("accuracy", r.mean_accuracy, method, dataset, ctx.extractor_name());
  ctx.add("accuracy_std", r.stddev, method, dataset, ctx.extractor_name());
}

void add_detection(Context& ctx, const std::string& method, const det::DetectionMetrics& m, const std::string& dataset) {
  const auto model = ctx.detector_name();
  ctx.add("ap", m.ap, method, dataset, model);
  ctx.add("ap50", m.ap50, method, dataset, model);
  ctx.add("ap75", m.ap75, method, dataset, model);
  ctx.add("precision", m.precision, method, dataset, model);
  ctx.add("recall", m.recall, method, dataset, model);
  ctx.add("f1", m.f1, method, dataset, model);
}

void add_iqa(Context& ctx, const std::string& method, const eval::IQAReport& r, const std::string& dataset) {
  ctx.add("rmse", r.rmse, method, dataset, "");
  ctx.add("psnr", r.psnr, method, dataset, "");
  ctx.add("ssim", r.ssim, method, dataset, "");
  ctx.add("ms_ssim", r.ms_ssim, method, dataset, "");
}

Tensor stack(const std::vector<det::DetectionSample>& samples) {
  return det::stack_images(samples, 0, samples.size());
}

void run_simulate(Context& ctx) {
  const auto cap = capture_fn(ctx.params());
  const auto faces = attack::protect(ctx.faces(ctx.cfg.data.faces), cap);
  write_face_dataset(faces, ctx.out / "simulated" / "faces");
  auto scenes = ctx.scenes(ctx.cfg.data.test_scenes);
  for (auto& s : scenes) s.image = cap(s.image);
  write_detection_dataset(scenes, ctx.out / "simulated" / "scenes");
  ctx.add("images", static_cast<double>(faces.samples.size()), "captured", Context::name_of(ctx.cfg.data.faces), "");
  ctx.add("images", static_cast<double>(scenes.size()), "captured", Context::name_of(ctx.cfg.data.test_scenes), "");
}

void run_train_isp(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto proxy = ctx.faces(cfg.data.proxy_faces);
  const auto scenes = ctx.scenes(cfg.data.scenes);
  auto detector = ctx.detector();
  if (proxy.samples.empty()) throw ProtocolError("proxy_faces is empty");
  Rng rng(ctx.seed(61));
  face::ConvEmbeddingNet attacker(proxy.samples[0].image.dim(2), cfg.models.feature_dim, rng, cfg.models.extractor_width);
  face::ProxyHead head(cfg.models.feature_dim, static_cast<int>(proxy.identities().size()), rng);
  adv::RunOptions ro;
  ro.checkpoint = ctx.out / "checkpoint.json";
  ro.divergence_dump = ctx.out / "divergence.json";
  ctx.say("adversarial training: " + std::to_string(cfg.train.maxiters) + " rounds");
  const auto res = adv::run(cfg.train, proxy, scenes, attacker, head, detector, ro);
  isp::export_params(res.params, ctx.out / "isp_params.json");
  adv::write_loss_csv(res.history, ctx.out / "loss.csv");
  save_model(detector, ctx.out / "models" / "detector_adversarial.json");
  const std::string ds = Context::name_of(cfg.data.proxy_faces);
  ctx.add("warmup_epochs", res.warmup.epochs, adv::to_string(cfg.train.mode), ds, "attacker");
  ctx.add("warmup_accuracy", res.warmup.accuracy, adv::to_string(cfg.train.mode), ds, "attacker");
  // Mean of each loss over the last tenth of the rounds.
  const int tail_from = cfg.train.maxiters - std::max(1, cfg.train.maxiters / 10);
  double sums[4] = {0, 0, 0, 0};
  int counts[4] = {0, 0, 0, 0};
  for (const auto& r : res.history) {
    if (r.round < tail_from) continue;
    const double v[4] = {r.ce, r.ns, r.cls, r.box};
    for (int i = 0; i < 4; ++i)
      if (!std::isnan(v[i])) sums[i] += v[i], ++counts[i];
  }
  const char* names[4] = {"final_L_ce", "final_L_ns", "final_L_cls", "final_L_box"};
  for (int i = 0; i < 4; ++i)
    if (counts[i] > 0) ctx.add(names[i], sums[i] / counts[i], adv::to_string(cfg.train.mode), ds, "attacker");
}

void run_train_enhancer(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto cap = capture_fn(ctx.params());
  const auto train = ctx.scenes(cfg.data.scenes);
  const auto test = ctx.scenes(cfg.data.test_scenes);
  Rng rng(ctx.seed(71));
  enh::UNet model = cfg.models.enhancer.empty() ? enh::UNet(rng, cfg.models.enhancer_width) : load_enhancer(cfg.models.enhancer);
  const auto losses = enh::train_enhancer(model, stack(train), cap, enh::masks_for(train), cfg.enhancer);
  save_model(model, ctx.out / "models" / "enhancer.json");
  const Tensor raw = stack(test);
  const Tensor captured = cap(raw);
  const Tensor enhanced = enh::enhance(model, captured);
  const Tensor masks = enh::masks_for(test);
  const std::string ds = Context::name_of(cfg.data.test_scenes);
  add_iqa(ctx, "captured", eval::iqa(captured, raw), ds);
  add_iqa(ctx, "enhanced", eval::iqa(enhanced, raw), ds);
  ctx.add("nonface_psnr", eval::masked_psnr(captured, raw, masks), "captured", ds, "");
  ctx.add("nonface_psnr", eval::masked_psnr(enhanced, raw, masks), "enhanced", ds, "");
  double face_sum = 0, face_count = 0;
  const int n = raw.dim(0), h = raw.dim(2), w = raw.dim(3);
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (masks.at(b, 0, y, x) == 0.0)
          for (int c = 0; c < 3; ++c) face_sum += enhanced.at(b, c, y, x), face_count += 1;
  if (face_count > 0) ctx.add("face_mean_intensity", face_sum / face_count, "enhanced", ds, "");
  if (!losses.empty()) ctx.add("final_loss", losses.back(), "enhanced", Context::name_of(cfg.data.scenes), "");
}

void run_eval_afr(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto cap = capture_fn(ctx.params());
  const auto faces = ctx.faces(cfg.data.faces);
  auto extractor = ctx.extractor();
  const std::string ds = Context::name_of(cfg.data.faces);
  face::ProtocolOptions o;
  o.runs = cfg.runs;
  o.seed = *cfg.seed;
  add_protocol(ctx, "raw", face::closed_set_protocol(faces, extractor, o), ds);
  o.protect_fn = cap;
  add_protocol(ctx, "captured", face::closed_set_protocol(faces, extractor, o), ds);
  o.protect_fn = {};
  add_protocol(ctx, "reenroll", attack::reenroll_gallery(faces, extractor, cap, o), ds);
}

void run_eval_utility(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto cap = capture_fn(ctx.params());
  const auto test = ctx.scenes(cfg.data.test_scenes);
  auto detector = ctx.detector();
  const std::string ds = Context::name_of(cfg.data.test_scenes);
  const auto raw = det::evaluate_detection(detector, test);
  const auto prot = det::evaluate_detection(detector, test, cap);
  add_detection(ctx, "raw", raw, ds);
  add_detection(ctx, "captured", prot, ds);
  if (raw.ap > 0) ctx.add("ap_ratio", prot.ap / raw.ap, "captured", ds, ctx.detector_name());
}

std::vector<fs::path> image_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(dir))
    if (f.is_regular_file() && is_image(f.path())) files.push_back(f.path().filename());
  std::sort(files.begin(), files.end());
  return files;
}

void run_eval_iqa(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const fs::path ref_dir = cfg.data.reference_images;
  const auto files = image_files(ref_dir);
  if (files.empty()) throw ProtocolError("no images in " + ref_dir.string());
  std::optional<face::ImageFn> cap;
  if (cfg.data.test_images.empty()) cap = capture_fn(ctx.params());
  eval::IQAReport mean;
  for (const auto& f : files) {
    const Tensor ref = io::read_image(ref_dir / f);
    const Tensor test = cap ? (*cap)(ref) : io::read_image(fs::path(cfg.data.test_images) / f);
    if (!test.same_shape(ref)) throw ProtocolError("size mismatch for " + f.string());
    const auto r = eval::iqa(test, ref);
    mean.rmse += r.rmse;
    mean.psnr += r.psnr;
    mean.ssim += r.ssim;
    mean.ms_ssim += r.ms_ssim;
  }
  const double n = static_cast<double>(files.size());
  mean.rmse /= n;
  mean.psnr /= n;
  mean.ssim /= n;
  mean.ms_ssim /= n;
  add_iqa(ctx, cap ? "captured" : "test", mean, ref_dir.filename().string());
}

void run_attack(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto cap = capture_fn(ctx.params());
  const auto faces = ctx.faces(cfg.data.faces);
  const auto train = ctx.faces(cfg.data.train_faces);
  auto extractor = ctx.extractor();
  const std::string ds = Context::name_of(cfg.data.faces);
  face::ProtocolOptions o;
  o.runs = cfg.runs;
  o.seed = *cfg.seed;
  o.protect_fn = cap;
  add_protocol(ctx, "non-adaptive", face::closed_set_protocol(faces, extractor, o), ds);
  o.protect_fn = {};
  add_protocol(ctx, "reenroll", attack::reenroll_gallery(faces, extractor, cap, o), ds);

  attack::AttackReport report{ctx.extractor_name(), NAN, NAN, NAN, NAN, NAN};
  double* slots[2][2] = {{&report.finetune_softmax, &report.finetune_arcface},
                         {&report.scratch_softmax, &report.scratch_arcface}};
  for (auto mode : {attack::RetrainMode::finetune, attack::RetrainMode::scratch})
    for (auto loss : {face::LossKind::softmax, face::LossKind::arcface}) {
      attack::RetrainConfig rc = cfg.retrain;
      rc.mode = mode;
      rc.loss = loss;
      rc.runs = cfg.runs;
      ctx.say("white-box retrain " + rc.label());
      const auto r = attack::retrain_fr(extractor, train, faces, cap, rc);
      add_protocol(ctx, rc.label(), r.protocol, ds);
      *slots[mode == attack::RetrainMode::scratch][loss == face::LossKind::arcface] = r.protocol.mean_accuracy;
      std::ofstream curve(ctx.out / ("retrain_" + rc.label() + ".csv"));
      curve.precision(17);
      curve << "epoch,train_loss,test_accuracy\n";
      for (std::size_t e = 0; e < r.epoch_losses.size(); ++e)
        curve << e + 1 << ',' << r.epoch_losses[e] << ',' << r.epoch_accuracies[e] << '\n';
    }
  ctx.say("white-box restoration");
  Rng rng(ctx.seed(81));
  enh::UNet restorer(rng, cfg.models.enhancer_width);
  const auto rr = attack::train_restorer(restorer, train.all_images(), cap, cfg.enhancer, faces, extractor, cfg.runs,
                                         *cfg.seed);
  add_protocol(ctx, "restoration", rr.protocol, ds);
  report.restoration = rr.protocol.mean_accuracy;
  attack::write_attack_report({report}, ctx.out / "attack_report.csv");
}

void run_sweep(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto faces = ctx.faces(cfg.data.faces);
  const auto test = ctx.scenes(cfg.data.test_scenes);
  auto extractor = ctx.extractor();
  auto detector = ctx.detector();
  std::vector<eval::SweepConfig> configs;
  configs.push_back({"raw", "-", {}});
  for (int f : cfg.sweep.low_resolution)
    configs.push_back({"low_resolution", std::to_string(f), [f](const Tensor& x) { return eval::low_resolution(x, f); }});
  for (const auto& [k, s] : cfg.sweep.defocus) {
    std::ostringstream label;
    label << k << '/' << s;
    configs.push_back({"defocus", label.str(), [k = k, s = s](const Tensor& x) { return eval::defocus(x, k, s); }});
  }
  for (const auto& [label, path] : cfg.sweep.params) configs.push_back({"isp", label, capture_fn(isp::import_params(path))});
  eval::SweepContext sc{&faces, &extractor, &detector, &test, cfg.runs, *cfg.seed};
  const auto points = eval::tradeoff_sweep(configs, sc);
  eval::write_sweep_csv(points, ctx.out / "sweep.csv");
  eval::write_sweep_svg(points, ctx.out / "sweep.svg");
  const std::string ds = Context::name_of(cfg.data.faces);
  for (const auto& p : points) {
    const std::string method = p.method + ":" + p.parameter;
    ctx.add("privacy_accuracy", p.privacy, method, ds, ctx.extractor_name());
    ctx.add("utility_ap", p.utility, method, Context::name_of(cfg.data.test_scenes), ctx.detector_name());
  }
}

void run_export_params(Context& ctx) {
  const auto& cfg = ctx.cfg;
  isp::ISPParams p;
  if (!cfg.checkpoint.empty()) {
    const json j = read_json(cfg.checkpoint);
    if (!j.contains("isp")) throw ParseError("isp", "checkpoint has no ISP parameters");
    p = isp::params_from_json(j["isp"].dump());
  } else {
    p = ctx.params();
  }
  isp::export_params(p, ctx.out / "isp_params.json");
  ctx.add("gamma_knots", static_cast<double>(p.gamma.outputs().size()), "isp", "", "");
  if (cfg.export_features) {
    const auto faces = ctx.faces(cfg.data.faces);
    auto extractor = ctx.extractor();
    eval::export_features(extractor, faces, ctx.out / "features_raw.csv");
    eval::export_features(extractor, attack::protect(faces, capture_fn(p)), ctx.out / "features_captured.csv");
    ctx.add("feature_rows", static_cast<double>(faces.samples.size()), "captured", Context::name_of(cfg.data.faces),
            ctx.extractor_name());
  }
}

void run_preliminary(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto faces = ctx.faces(cfg.data.faces);
  const auto test = ctx.scenes(cfg.data.test_scenes);
  auto extractor = ctx.extractor();
  auto detector = ctx.detector();
  const auto r = eval::preliminary_inversion_analysis(faces.all_images(), extractor, detector, test);
  const std::string ds = Context::name_of(cfg.data.faces);
  ctx.add("mean_similarity", r.mean_similarity, "inverted", ds, ctx.extractor_name());
  ctx.add("same_identity_rate", r.same_identity_rate, "inverted", ds, ctx.extractor_name());
  ctx.add("miss_rate", r.miss_rate, "inverted", Context::name_of(cfg.data.test_scenes), ctx.detector_name());
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& config, const Log& log) {
  validate(config);
  check_paths(config);
  const std::string hash = config_hash(config);
  Context ctx{config, config.out, std::string(to_string(config.kind)) + "-" + hash.substr(0, 8), utc_now(), log, {}};
  OutputLock lock(ctx.out);
  try {
    switch (config.kind) {
      case ExperimentKind::simulate: run_simulate(ctx); break;
      case ExperimentKind::train_isp: run_train_isp(ctx); break;
      case ExperimentKind::train_enhancer: run_train_enhancer(ctx); break;
      case ExperimentKind::eval_afr: run_eval_afr(ctx); break;
      case ExperimentKind::eval_utility: run_eval_utility(ctx); break;
      case ExperimentKind::eval_iqa: run_eval_iqa(ctx); break;
      case ExperimentKind::attack: run_attack(ctx); break;
      case ExperimentKind::sweep: run_sweep(ctx); break;
      case ExperimentKind::export_params: run_export_params(ctx); break;
      case ExperimentKind::preliminary: run_preliminary(ctx); break;
    }
  } catch (const Error& e) {
    throw Error(ctx.id + ": " + e.what());
  }
  append_results(ctx.out / "results.csv", ctx.rows);
  json manifest = {{"experiment_id", ctx.id},
                   {"kind", to_string(config.kind)},
                   {"seed", *config.seed},
                   {"config_hash", hash},
                   {"timestamp", ctx.timestamp},
                   {"versions", {{"privisp", PRIVISP_VERSION}}},
                   {"config", config_json(config)}};
  write_json(manifest, ctx.out / ("manifest-" + ctx.id + ".json"));
  return {ctx.id, ctx.rows};
}

}  // namespace privisp::wb
