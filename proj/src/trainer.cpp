#include "gcrl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "gcrl/augment.hpp"
#include "gcrl/errors.hpp"
#include "gcrl/losses.hpp"
#include "gcrl/serialize.hpp"

namespace gcrl {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

bool name_excluded(const std::string& name, const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

// Parameters updated this step; every listed parameter participates in the
// step's graph, so its gradient is fresh.
std::vector<std::string> excluded_prefixes(TrainMode mode, int phase) {
  switch (mode) {
    case TrainMode::gcrl:
      return phase == 1 ? std::vector<std::string>{"proj.", "cls.", "final_ln."}
                        : std::vector<std::string>{"cls."};
    case TrainMode::generative_only:
      return {"proj.", "cls.", "final_ln."};
    case TrainMode::contrastive_only:
      return {"dec.", "dec_final_ln.", "out_head", "cls."};
    case TrainMode::supervised_hybrid:
      return phase == 1 ? std::vector<std::string>{"proj.", "cls.", "final_ln."}
                        : std::vector<std::string>{"proj."};
  }
  return {};
}

std::string metric_cell(const std::optional<double>& v) {
  return v ? format_float(*v) : std::string();
}

} // namespace

float PhasePlan::lr_for(std::int64_t global_step) const {
  std::int64_t boundary = static_cast<std::int64_t>(phase1_epochs) * steps_per_epoch;
  if (global_step < boundary) return lr_at(global_step, phase1);
  return lr_at(global_step - boundary, phase2);
}

PhasePlan make_phase_plan(const ExperimentConfig& cfg, int steps_per_epoch) {
  PhasePlan plan;
  plan.steps_per_epoch = steps_per_epoch;
  auto sched = [&](float peak, int epochs) {
    LrSchedule s;
    s.peak_rate = peak;
    s.warmup_epochs = cfg.warmup_epochs;
    s.total_epochs = epochs;
    s.steps_per_epoch = steps_per_epoch;
    return s;
  };
  switch (cfg.mode) {
    case TrainMode::gcrl:
    case TrainMode::supervised_hybrid:
      plan.phase1_epochs = cfg.phase1_epochs();
      plan.phase1 = sched(cfg.peak_lr, plan.phase1_epochs);
      plan.phase2 = sched(cfg.phase2_peak(), cfg.epochs - plan.phase1_epochs);
      break;
    case TrainMode::generative_only:
      plan.phase1_epochs = cfg.epochs;
      plan.phase1 = sched(cfg.peak_lr, cfg.epochs);
      break;
    case TrainMode::contrastive_only:
      plan.phase1_epochs = 0;
      plan.phase2 = sched(cfg.peak_lr, cfg.epochs);
      break;
  }
  for (const LrSchedule* s : {&plan.phase1, &plan.phase2})
    if (s->total_epochs > 0 && s->warmup_epochs > s->total_epochs)
      throw ConfigError("warmup_epochs", "warmup of " + std::to_string(s->warmup_epochs) +
                                             " epochs exceeds a " + std::to_string(s->total_epochs) +
                                             "-epoch phase");
  return plan;
}

ViewBatch make_batch(const Dataset& dataset, const Codebook& codebook,
                     const std::vector<std::size_t>& indices, int epoch,
                     const ExperimentConfig& cfg) {
  ViewBatch batch;
  std::vector<TokenGrid> v1, v2;
  v1.reserve(indices.size());
  v2.reserve(indices.size());
  const AugPolicy& policy1 =
      cfg.mode == TrainMode::contrastive_only ? cfg.strong_augment : cfg.weak_augment;
  const AugPolicy& policy2 = cfg.strong_augment;
  for (std::size_t idx : indices) {
    if (idx >= dataset.size())
      throw ValueError("make_batch: index " + std::to_string(idx) + " out of range for dataset of " +
                       std::to_string(dataset.size()));
    const Image& img = dataset.images[idx];
    RngStream rng1(cfg.seed, StreamPurpose::aug_weak, static_cast<std::uint64_t>(epoch), idx);
    RngStream rng2(cfg.seed, StreamPurpose::aug_strong, static_cast<std::uint64_t>(epoch), idx);
    v1.push_back(encode(apply_policy(img, policy1, rng1), codebook));
    v2.push_back(encode(apply_policy(img, policy2, rng2), codebook));
    if (dataset.labeled()) batch.labels.push_back(dataset.labels[idx]);
  }
  batch.view1_tokens = pack_token_grids(v1);
  batch.view2_tokens = pack_token_grids(v2);
  return batch;
}

StepMetrics train_step(TrainerState& state, const ViewBatch& batch, const ExperimentConfig& cfg,
                       const PhasePlan& plan, int epoch) {
  GcrlModel& model = state.model;
  int phase = plan.phase_of_epoch(epoch);
  int B = batch.view1_tokens.shape[0];
  float lr = plan.lr_for(state.global_step);

  RngStream drop(cfg.seed, StreamPurpose::dropout, static_cast<std::uint64_t>(epoch),
                 static_cast<std::uint64_t>(state.global_step));
  ForwardCtx ctx{true, &drop};

  bool gen_branch = cfg.mode != TrainMode::contrastive_only;
  bool con_branch = (cfg.mode == TrainMode::gcrl && phase == 2) || cfg.mode == TrainMode::contrastive_only;
  bool sup_branch = cfg.mode == TrainMode::supervised_hybrid && phase == 2;

  StepMetrics metrics;
  metrics.step = state.global_step;
  metrics.epoch = epoch;
  metrics.phase = phase;
  metrics.lr = lr;

  Tensor loss = Tensor::scalar(0.0f);
  Tensor enc_out1;
  if (gen_branch || con_branch || sup_branch)
    enc_out1 = model.run_encoder(model.add_positions(model.embed_tokens(batch.view1_tokens)), ctx);

  if (gen_branch) {
    auto logits = model.logits_from_grid(enc_out1, ctx);
    IntArray flat_targets(Shape{B, model.cfg.seq_len()},
                          std::vector<std::int32_t>(batch.view1_tokens.data));
    auto gen = generative_nll(logits, flat_targets);
    metrics.gen_loss = gen.item();
    loss = add(loss, scale(gen, cfg.weights.alpha));
  }
  if (con_branch) {
    auto enc_out2 = model.run_encoder(model.add_positions(model.embed_tokens(batch.view2_tokens)), ctx);
    auto z1 = model.project(model.pool_representation(enc_out1));
    auto z2 = model.project(model.pool_representation(enc_out2));
    auto con = nt_xent(z1, z2, cfg.weights.temperature);
    metrics.con_loss = con.item();
    loss = add(loss, scale(con, cfg.weights.beta));
  }
  if (sup_branch) {
    if (batch.labels.empty()) throw ValueError("train_step: supervised_hybrid needs labels");
    auto enc_out2 = model.run_encoder(model.add_positions(model.embed_tokens(batch.view2_tokens)), ctx);
    auto logits_cls = model.classifier_logits(model.pool_representation(enc_out2));
    IntArray labels(Shape{B}, std::vector<std::int32_t>(batch.labels));
    auto ce = scale(sum_all(gather_last(log_softmax(logits_cls, 1), labels)),
                    -1.0f / static_cast<float>(B));
    metrics.con_loss = ce.item();
    loss = add(loss, scale(ce, cfg.weights.beta));
  }

  metrics.loss = loss.item();
  if (!std::isfinite(metrics.loss))
    throw ValueError("train_step: non-finite loss " + std::to_string(metrics.loss) + " at step " +
                     std::to_string(state.global_step) + " (epoch " + std::to_string(epoch) + ")");
  backward(loss);

  auto params = model.parameters();
  auto excluded = excluded_prefixes(cfg.mode, phase);
  std::vector<GradRef> grads;
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (name_excluded(params[i].name, excluded)) continue;
    auto& t = *params[i].tensor;
    grads.push_back({params[i].name, std::span<float>(t.grad())});
    refs.push_back({params[i].name, std::span<float>(t.data()), std::span<const float>(t.grad()), i});
  }
  double pre_norm = 0.0;
  for (const auto& g : grads)
    for (float x : g.grad) pre_norm += static_cast<double>(x) * x;
  pre_norm = std::sqrt(pre_norm);
  float factor = clip_global_norm(std::span<GradRef>(grads), cfg.grad_clip);
  metrics.grad_norm = pre_norm * factor;

  AdamWHyper hyper;
  hyper.weight_decay = cfg.weight_decay;
  adamw_step(std::span<ParamRef>(refs), state.optim, hyper, lr);

  state.global_step += 1;
  return metrics;
}

std::vector<float> first_token_marginal(const Dataset& dataset, const Codebook& codebook, int vocab) {
  std::vector<float> marginal(static_cast<std::size_t>(vocab), 0.0f);
  if (dataset.size() == 0) {
    marginal.assign(static_cast<std::size_t>(vocab), 1.0f / static_cast<float>(vocab));
    return marginal;
  }
  for (const auto& img : dataset.images) {
    auto grid = encode(img, codebook);
    marginal[static_cast<std::size_t>(grid.tokens[0])] += 1.0f;
  }
  for (auto& v : marginal) v /= static_cast<float>(dataset.size());
  return marginal;
}

// -- checkpoint io -----------------------------------------------------------

namespace {

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset; // bytes into the payload
};

void append_tensor_payload(std::vector<std::uint8_t>& payload, const std::vector<float>& values) {
  for (float v : values) io::put_f32(payload, v);
}

} // namespace

void save_checkpoint(const std::string& path, const TrainerState& state,
                     const ExperimentConfig& cfg) {
  auto& model = const_cast<TrainerState&>(state).model;
  auto params = model.parameters();
  if (state.optim.slots() != params.size())
    throw ShapeError("save_checkpoint: optimizer has " + std::to_string(state.optim.slots()) +
                     " slots for " + std::to_string(params.size()) + " parameters");

  nlohmann::json header;
  header["config"] = config_to_json(cfg);
  header["global_step"] = state.global_step;
  header["next_epoch"] = state.next_epoch;
  header["optim_step"] = state.optim.step;
  nlohmann::json manifest = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  auto add_entry = [&](const std::string& name, const Shape& shape, const std::vector<float>& values) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = shape;
    e["offset"] = payload.size();
    manifest.push_back(std::move(e));
    append_tensor_payload(payload, values);
  };
  for (auto& p : params) add_entry(p.name, p.tensor->shape(), p.tensor->data());
  for (std::size_t i = 0; i < params.size(); ++i)
    add_entry("optim.m." + params[i].name, params[i].tensor->shape(), state.optim.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i)
    add_entry("optim.v." + params[i].name, params[i].tensor->shape(), state.optim.v[i]);
  add_entry("first_token_marginal", {static_cast<int>(state.first_token_marginal.size())},
            state.first_token_marginal);
  header["tensors"] = std::move(manifest);

  std::string header_str = header.dump();
  std::vector<std::uint8_t> out{'G', 'C', 'K', 'P'};
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, header_str.size());
  out.insert(out.end(), header_str.begin(), header_str.end());
  out.insert(out.end(), payload.begin(), payload.end());
  io::write_file(path, out);
}

TrainerState load_checkpoint(const std::string& path, ExperimentConfig* cfg_out) {
  auto bytes = io::read_file(path);
  io::Reader r(bytes.data(), bytes.size(), path);
  r.expect_magic("GCKP");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::uint64_t header_len = r.u64();
  if (header_len > r.remaining())
    throw IoError(path + ": header length " + std::to_string(header_len) + " exceeds file size");
  std::string header_str(header_len, '\0');
  r.bytes(header_str.data(), header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": corrupt checkpoint header: " + e.what());
  }

  ExperimentConfig cfg = parse_config(header.at("config"));
  TrainerState state;
  state.model = GcrlModel::init(cfg.model, cfg.seed);
  state.global_step = header.at("global_step").get<std::int64_t>();
  state.next_epoch = header.at("next_epoch").get<int>();

  auto params = state.model.parameters();
  std::vector<std::size_t> sizes;
  std::vector<bool> decay;
  for (auto& p : params) {
    sizes.push_back(p.tensor->numel());
    decay.push_back(p.decay);
  }
  state.optim.init(sizes, decay);
  state.optim.step = header.at("optim_step").get<std::int64_t>();

  // expected manifest order mirrors save_checkpoint
  std::vector<std::pair<std::string, std::vector<float>*>> expected;
  for (auto& p : params) expected.emplace_back(p.name, &p.tensor->data());
  for (std::size_t i = 0; i < params.size(); ++i)
    expected.emplace_back("optim.m." + params[i].name, &state.optim.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i)
    expected.emplace_back("optim.v." + params[i].name, &state.optim.v[i]);
  state.first_token_marginal.resize(static_cast<std::size_t>(cfg.model.vocab));
  expected.emplace_back("first_token_marginal", &state.first_token_marginal);

  const auto& manifest = header.at("tensors");
  if (manifest.size() != expected.size())
    throw IoError(path + ": manifest lists " + std::to_string(manifest.size()) + " tensors, expected " +
                  std::to_string(expected.size()));
  std::size_t payload_base = r.offset();
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& entry = manifest.at(i);
    std::string name = entry.at("name").get<std::string>();
    if (name != expected[i].first)
      throw IoError(path + ": tensor '" + name + "' where '" + expected[i].first + "' was expected");
    auto shape = entry.at("shape").get<std::vector<int>>();
    std::size_t count = shape_numel(shape);
    std::vector<float>& dst = *expected[i].second;
    if (count != dst.size())
      throw IoError(path + ": tensor '" + name + "' has " + std::to_string(count) +
                    " values, expected " + std::to_string(dst.size()));
    std::size_t offset = entry.at("offset").get<std::size_t>();
    if (offset != cursor)
      throw IoError(path + ": tensor '" + name + "' at payload offset " + std::to_string(offset) +
                    ", expected " + std::to_string(cursor));
    cursor += count * 4;
    if (payload_base + cursor > bytes.size())
      throw IoError(path + ": tensor '" + name + "' truncated at byte offset " +
                    std::to_string(bytes.size()));
    for (auto& v : dst) v = r.f32();
  }
  if (r.remaining() != 0)
    throw IoError(path + ": " + std::to_string(r.remaining()) + " trailing bytes after payload");
  if (cfg_out) *cfg_out = cfg;
  return state;
}

void verify_resume_compatible(const ExperimentConfig& checkpoint_cfg,
                              const ExperimentConfig& current_cfg) {
  nlohmann::json a = config_to_json(checkpoint_cfg).at("model");
  nlohmann::json b = config_to_json(current_cfg).at("model");
  for (auto it = a.begin(); it != a.end(); ++it)
    if (b.at(it.key()) != it.value())
      throw ConfigError("model." + it.key(), "checkpoint was trained with " + it.value().dump() +
                                                 ", config asks for " + b.at(it.key()).dump());
}

TrainArtifacts run_training(const ExperimentConfig& cfg, const std::string& out_dir) {
  if (cfg.codebook_path.empty()) throw ConfigError("codebook", "missing required field");
  std::filesystem::create_directories(out_dir);
  Codebook codebook = load_codebook(cfg.codebook_path);
  if (codebook.k != cfg.model.vocab)
    throw ConfigError("model.vocab", "codebook has " + std::to_string(codebook.k) +
                                         " codes but the model expects " +
                                         std::to_string(cfg.model.vocab));
  Dataset dataset = read_dataset(cfg.dataset);
  if (cfg.mode == TrainMode::supervised_hybrid && !dataset.labeled())
    throw ConfigError("dataset", "supervised_hybrid requires a labeled dataset");

  TrainerState state;
  ExperimentConfig effective = cfg;
  if (!cfg.resume_path.empty()) {
    ExperimentConfig saved_cfg;
    state = load_checkpoint(cfg.resume_path, &saved_cfg);
    verify_resume_compatible(saved_cfg, cfg);
  } else {
    state.model = GcrlModel::init(cfg.model, cfg.seed);
    auto params = state.model.parameters();
    std::vector<std::size_t> sizes;
    std::vector<bool> decay;
    for (auto& p : params) {
      sizes.push_back(p.tensor->numel());
      decay.push_back(p.decay);
    }
    state.optim.init(sizes, decay);
    state.first_token_marginal = first_token_marginal(dataset, codebook, cfg.model.vocab);
  }

  int steps_per_epoch = static_cast<int>(dataset.size()) / cfg.batch_size; // drop-last
  if (cfg.epochs > 0 && steps_per_epoch == 0)
    throw ConfigError("batch_size", "dataset of " + std::to_string(dataset.size()) +
                                        " images yields no full batch of " +
                                        std::to_string(cfg.batch_size));
  PhasePlan plan = make_phase_plan(cfg, steps_per_epoch);

  TrainArtifacts art;
  art.metrics_path = out_dir + "/metrics.csv";
  art.checkpoint_path = out_dir + "/checkpoint.gckp";
  CsvWriter metrics(art.metrics_path, "step,epoch,phase,loss,gen_loss,con_loss,grad_norm,lr");

  std::vector<std::size_t> order(dataset.size());
  for (int epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream shuffle_rng(cfg.seed, StreamPurpose::shuffle, static_cast<std::uint64_t>(epoch), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = shuffle_rng.below(static_cast<std::uint32_t>(i));
      std::swap(order[i - 1], order[j]);
    }
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<std::size_t> indices(order.begin() + static_cast<std::ptrdiff_t>(s) * cfg.batch_size,
                                       order.begin() + static_cast<std::ptrdiff_t>(s + 1) * cfg.batch_size);
      ViewBatch batch = make_batch(dataset, codebook, indices, epoch, cfg);
      StepMetrics m = train_step(state, batch, cfg, plan, epoch);
      metrics.row({std::to_string(m.step), std::to_string(m.epoch), std::to_string(m.phase),
                   format_float(m.loss), metric_cell(m.gen_loss), metric_cell(m.con_loss),
                   format_float(m.grad_norm), format_float(m.lr)});
    }
    state.next_epoch = epoch + 1;
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
      save_checkpoint(out_dir + "/checkpoint_epoch_" + std::to_string(epoch + 1) + ".gckp", state,
                      effective);
    }
  }
  metrics.flush();
  save_checkpoint(art.checkpoint_path, state, effective);
  return art;
}

} // namespace gcrl
