#include "gcrl/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "gcrl/errors.hpp"

namespace gcrl {

namespace {

using nlohmann::json;

// Tracks consumed keys so finish() can reject typos with their dotted path.
class Fields {
public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "(root)" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    consumed_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(at(key), e.what());
    }
  }

  template <typename T>
  T require(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(at(key), "missing required field");
    return get<T>(key, T{});
  }

  const json* child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    consumed_.insert(key);
    if (!j_.at(key).is_object()) throw ConfigError(at(key), "expected an object");
    return &j_.at(key);
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!consumed_.count(it.key())) throw ConfigError(at(it.key()), "unknown field");
  }

private:
  const json& j_;
  std::string path_;
  std::set<std::string> consumed_;
};

AttentionKind attention_from_string(const std::string& s, const std::string& field) {
  if (s == "axial") return AttentionKind::axial;
  if (s == "dense") return AttentionKind::dense;
  throw ConfigError(field, "expected 'axial' or 'dense', got '" + s + "'");
}

AugKind aug_kind_from_string(const std::string& s, const std::string& field) {
  if (s == "none") return AugKind::none;
  if (s == "weak") return AugKind::weak;
  if (s == "strong") return AugKind::strong;
  throw ConfigError(field, "expected 'none', 'weak' or 'strong', got '" + s + "'");
}

DatasetKind dataset_kind_from_string(const std::string& s, const std::string& field) {
  if (s == "cifar_binary") return DatasetKind::cifar_binary;
  if (s == "idx_ubyte") return DatasetKind::idx_ubyte;
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "raw_dump") return DatasetKind::raw_dump;
  throw ConfigError(field, "unknown dataset kind '" + s + "'");
}

ModelConfig parse_model(const json& j, const std::string& path) {
  Fields f(j, path);
  ModelConfig m;
  m.height = f.get("height", m.height);
  m.width = f.get("width", m.width);
  m.vocab = f.get("vocab", m.vocab);
  m.d_model = f.get("d_model", m.d_model);
  m.n_heads = f.get("n_heads", m.n_heads);
  m.mlp_mult = f.get("mlp_mult", m.mlp_mult);
  m.n_enc_blocks = f.get("n_enc_blocks", m.n_enc_blocks);
  m.n_dec_blocks = f.get("n_dec_blocks", m.n_dec_blocks);
  m.attention = attention_from_string(f.get<std::string>("attention", "axial"), f.at("attention"));
  m.dropout = f.get("dropout", m.dropout);
  m.proj_hidden = f.get("proj_hidden", m.proj_hidden);
  m.proj_out = f.get("proj_out", m.proj_out);
  m.n_classes = f.get("n_classes", m.n_classes);
  f.finish();
  try {
    m.validate();
  } catch (const ValueError& e) {
    throw ConfigError(path, e.what());
  }
  return m;
}

DatasetSpec parse_dataset(const json& j, const std::string& path) {
  Fields f(j, path);
  DatasetSpec d;
  d.kind = dataset_kind_from_string(f.require<std::string>("kind"), f.at("kind"));
  d.path = f.get<std::string>("path", "");
  d.labels_path = f.get<std::string>("labels_path", "");
  d.synth.n_per_class = f.get("n_per_class", d.synth.n_per_class);
  d.synth.n_classes = f.get("n_classes", d.synth.n_classes);
  d.synth.image_size = f.get("image_size", d.synth.image_size);
  d.synth.noise = f.get("noise", d.synth.noise);
  d.synth.seed = f.get<std::uint64_t>("seed", d.synth.seed);
  d.synth.split_offset = f.get<std::uint64_t>("split_offset", d.synth.split_offset);
  f.finish();
  if (d.kind != DatasetKind::synthetic && d.path.empty())
    throw ConfigError(path + ".path", "missing required field");
  return d;
}

AugPolicy parse_augment(const json& j, const std::string& path, AugPolicy base) {
  Fields f(j, path);
  base.kind = aug_kind_from_string(f.require<std::string>("kind"), f.at("kind"));
  base.pad = f.get("pad", base.pad);
  if (f.has("crop_scale")) {
    auto v = f.get<std::vector<float>>("crop_scale", {});
    if (v.size() != 2) throw ConfigError(path + ".crop_scale", "expected [lo, hi]");
    base.crop_scale_lo = v[0];
    base.crop_scale_hi = v[1];
  }
  if (f.has("aspect")) {
    auto v = f.get<std::vector<float>>("aspect", {});
    if (v.size() != 2) throw ConfigError(path + ".aspect", "expected [lo, hi]");
    base.aspect_lo = v[0];
    base.aspect_hi = v[1];
  }
  if (f.has("jitter")) {
    auto v = f.get<std::vector<float>>("jitter", {});
    if (v.size() != 4)
      throw ConfigError(path + ".jitter", "expected [brightness, contrast, saturation, hue]");
    base.jitter_brightness = v[0];
    base.jitter_contrast = v[1];
    base.jitter_saturation = v[2];
    base.jitter_hue = v[3];
  }
  base.jitter_prob = f.get("jitter_prob", base.jitter_prob);
  base.gray_prob = f.get("gray_prob", base.gray_prob);
  base.flip_prob = f.get("flip_prob", base.flip_prob);
  f.finish();
  try {
    base.validate();
  } catch (const ValueError& e) {
    throw ConfigError(path, e.what());
  }
  return base;
}

EvalConfig parse_eval(const json& j, const std::string& path) {
  Fields f(j, path);
  EvalConfig e;
  e.probe_lr = f.get("probe_lr", e.probe_lr);
  e.probe_epochs = f.get("probe_epochs", e.probe_epochs);
  e.probe_batch = f.get("probe_batch", e.probe_batch);
  e.probe_weight_decay = f.get("probe_weight_decay", e.probe_weight_decay);
  e.knn_k = f.get("knn_k", e.knn_k);
  e.ece_bins = f.get("ece_bins", e.ece_bins);
  e.lowshot_fraction = f.get("lowshot_fraction", e.lowshot_fraction);
  e.lowshot_seeds = f.get("lowshot_seeds", e.lowshot_seeds);
  e.sample_count = f.get("sample_count", e.sample_count);
  e.sample_temperature = f.get("sample_temperature", e.sample_temperature);
  e.rep_position = f.get<std::string>("rep_position", e.rep_position);
  f.finish();
  if (e.rep_position != "half" && e.rep_position != "last")
    throw ConfigError(path + ".rep_position", "expected 'half' or 'last'");
  return e;
}

} // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::gcrl: return "gcrl";
    case TrainMode::generative_only: return "generative_only";
    case TrainMode::contrastive_only: return "contrastive_only";
    case TrainMode::supervised_hybrid: return "supervised_hybrid";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s, const std::string& field) {
  if (s == "gcrl") return TrainMode::gcrl;
  if (s == "generative_only") return TrainMode::generative_only;
  if (s == "contrastive_only") return TrainMode::contrastive_only;
  if (s == "supervised_hybrid") return TrainMode::supervised_hybrid;
  throw ConfigError(field, "unknown training mode '" + s + "'");
}

void ExperimentConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs", "must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size", "must be at least 1");
  if (phase1_fraction < 0.0f || phase1_fraction > 1.0f)
    throw ConfigError("phase1_fraction", "must lie in [0, 1]");
  if (grad_clip <= 0.0f) throw ConfigError("grad_clip", "must be positive");
  if (weight_decay < 0.0f) throw ConfigError("weight_decay", "must be non-negative");
  if (peak_lr < 0.0f) throw ConfigError("peak_lr", "must be non-negative");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs", "must be non-negative");
  try {
    weights.validate();
  } catch (const ValueError& e) {
    throw ConfigError("alpha", e.what());
  }
  if (mode != TrainMode::contrastive_only && model.n_dec_blocks < 1)
    throw ConfigError("model.n_dec_blocks", "generative objectives require a decoder");
  if (mode == TrainMode::supervised_hybrid && model.n_classes < 2)
    throw ConfigError("model.n_classes", "supervised_hybrid requires n_classes >= 2");
}

ExperimentConfig parse_config(const json& j) {
  Fields f(j, "");
  ExperimentConfig c;
  c.note = f.get<std::string>("note", "");
  c.seed = f.get<std::uint64_t>("seed", c.seed);
  c.mode = train_mode_from_string(f.get<std::string>("mode", "gcrl"), "mode");
  c.epochs = f.get("epochs", c.epochs);
  c.batch_size = f.get("batch_size", c.batch_size);
  c.phase1_fraction = f.get("phase1_fraction", c.phase1_fraction);
  c.warmup_epochs = f.get("warmup_epochs", c.warmup_epochs);
  c.peak_lr = f.get("peak_lr", c.peak_lr);
  c.peak_lr_phase2 = f.get("peak_lr_phase2", c.peak_lr_phase2);
  c.weight_decay = f.get("weight_decay", c.weight_decay);
  c.grad_clip = f.get("grad_clip", c.grad_clip);
  c.weights.alpha = f.get("alpha", c.weights.alpha);
  c.weights.beta = f.get("beta", c.weights.beta);
  c.weights.temperature = f.get("temperature", c.weights.temperature);
  c.checkpoint_every = f.get("checkpoint_every", c.checkpoint_every);
  c.codebook_path = f.get<std::string>("codebook", "");
  c.resume_path = f.get<std::string>("resume", "");
  if (const json* m = f.child("model")) c.model = parse_model(*m, "model");
  if (const json* d = f.child("dataset")) c.dataset = parse_dataset(*d, "dataset");
  if (const json* d = f.child("eval_dataset")) {
    c.eval_dataset = parse_dataset(*d, "eval_dataset");
    c.has_eval_dataset = true;
  }
  if (const json* d = f.child("ood_dataset")) {
    c.ood_dataset = parse_dataset(*d, "ood_dataset");
    c.has_ood_dataset = true;
  }
  if (const json* a = f.child("weak_augment")) c.weak_augment = parse_augment(*a, "weak_augment", weak_policy_default());
  if (const json* a = f.child("strong_augment"))
    c.strong_augment = parse_augment(*a, "strong_augment", strong_policy_default());
  if (const json* e = f.child("eval")) c.eval = parse_eval(*e, "eval");
  if (const json* cb = f.child("codebook_build")) {
    Fields cf(*cb, "codebook_build");
    c.codebook_build.k = cf.get("k", c.codebook_build.k);
    c.codebook_build.max_iters = cf.get("max_iters", c.codebook_build.max_iters);
    c.codebook_build.max_pixels = cf.get<std::size_t>("max_pixels", c.codebook_build.max_pixels);
    cf.finish();
  }
  if (const json* b = f.child("bench")) {
    Fields bf(*b, "bench");
    c.bench.repetitions = bf.get("repetitions", c.bench.repetitions);
    c.bench.batch_size = bf.get("batch_size", c.bench.batch_size);
    bf.finish();
  }
  f.finish();
  c.validate();
  return c;
}

json apply_overrides(json j, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(kv, "override must look like key=value");
    std::string key = kv.substr(0, eq);
    std::string raw = kv.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw; // plain string
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      auto dot = key.find('.', start);
      std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError(key, "empty path segment in override");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
      if (!node->is_object()) throw ConfigError(key.substr(0, dot), "override path crosses a non-object");
      start = dot + 1;
    }
  }
  return j;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw IoError("load_config: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path, std::string("invalid JSON: ") + e.what());
  }
  return parse_config(apply_overrides(std::move(j), overrides));
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  if (!c.note.empty()) j["note"] = c.note;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["phase1_fraction"] = c.phase1_fraction;
  j["warmup_epochs"] = c.warmup_epochs;
  j["peak_lr"] = c.peak_lr;
  j["peak_lr_phase2"] = c.peak_lr_phase2;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["alpha"] = c.weights.alpha;
  j["beta"] = c.weights.beta;
  j["temperature"] = c.weights.temperature;
  j["checkpoint_every"] = c.checkpoint_every;
  if (!c.codebook_path.empty()) j["codebook"] = c.codebook_path;
  json m;
  m["height"] = c.model.height;
  m["width"] = c.model.width;
  m["vocab"] = c.model.vocab;
  m["d_model"] = c.model.d_model;
  m["n_heads"] = c.model.n_heads;
  m["mlp_mult"] = c.model.mlp_mult;
  m["n_enc_blocks"] = c.model.n_enc_blocks;
  m["n_dec_blocks"] = c.model.n_dec_blocks;
  m["attention"] = c.model.attention == AttentionKind::axial ? "axial" : "dense";
  m["dropout"] = c.model.dropout;
  m["proj_hidden"] = c.model.proj_hidden;
  m["proj_out"] = c.model.proj_out;
  m["n_classes"] = c.model.n_classes;
  j["model"] = m;
  auto dataset_json = [](const DatasetSpec& d) {
    json out;
    switch (d.kind) {
      case DatasetKind::cifar_binary: out["kind"] = "cifar_binary"; break;
      case DatasetKind::idx_ubyte: out["kind"] = "idx_ubyte"; break;
      case DatasetKind::synthetic: out["kind"] = "synthetic"; break;
      case DatasetKind::raw_dump: out["kind"] = "raw_dump"; break;
    }
    if (!d.path.empty()) out["path"] = d.path;
    if (!d.labels_path.empty()) out["labels_path"] = d.labels_path;
    if (d.kind == DatasetKind::synthetic) {
      out["n_per_class"] = d.synth.n_per_class;
      out["n_classes"] = d.synth.n_classes;
      out["image_size"] = d.synth.image_size;
      out["noise"] = d.synth.noise;
      out["seed"] = d.synth.seed;
      out["split_offset"] = d.synth.split_offset;
    }
    return out;
  };
  j["dataset"] = dataset_json(c.dataset);
  if (c.has_eval_dataset) j["eval_dataset"] = dataset_json(c.eval_dataset);
  if (c.has_ood_dataset) j["ood_dataset"] = dataset_json(c.ood_dataset);
  auto aug_json = [](const AugPolicy& p) {
    json out;
    out["kind"] = p.kind == AugKind::none ? "none" : p.kind == AugKind::weak ? "weak" : "strong";
    out["pad"] = p.pad;
    out["crop_scale"] = {p.crop_scale_lo, p.crop_scale_hi};
    out["aspect"] = {p.aspect_lo, p.aspect_hi};
    out["jitter"] = {p.jitter_brightness, p.jitter_contrast, p.jitter_saturation, p.jitter_hue};
    out["jitter_prob"] = p.jitter_prob;
    out["gray_prob"] = p.gray_prob;
    out["flip_prob"] = p.flip_prob;
    return out;
  };
  j["weak_augment"] = aug_json(c.weak_augment);
  j["strong_augment"] = aug_json(c.strong_augment);
  json e;
  e["probe_lr"] = c.eval.probe_lr;
  e["probe_epochs"] = c.eval.probe_epochs;
  e["probe_batch"] = c.eval.probe_batch;
  e["probe_weight_decay"] = c.eval.probe_weight_decay;
  e["knn_k"] = c.eval.knn_k;
  e["ece_bins"] = c.eval.ece_bins;
  e["lowshot_fraction"] = c.eval.lowshot_fraction;
  e["lowshot_seeds"] = c.eval.lowshot_seeds;
  e["sample_count"] = c.eval.sample_count;
  e["sample_temperature"] = c.eval.sample_temperature;
  e["rep_position"] = c.eval.rep_position;
  j["eval"] = e;
  json cb;
  cb["k"] = c.codebook_build.k;
  cb["max_iters"] = c.codebook_build.max_iters;
  cb["max_pixels"] = c.codebook_build.max_pixels;
  j["codebook_build"] = cb;
  json b;
  b["repetitions"] = c.bench.repetitions;
  b["batch_size"] = c.bench.batch_size;
  j["bench"] = b;
  return j;
}

} // namespace gcrl
