#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gcrl/eval.hpp"
#include "gcrl/losses.hpp"
#include "gcrl/serialize.hpp"
#include "gcrl/trainer.hpp"

using namespace gcrl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

ExperimentConfig tiny_cfg(const std::string& codebook_path) {
  ExperimentConfig cfg;
  cfg.seed = 3;
  cfg.mode = TrainMode::gcrl;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.warmup_epochs = 1;
  cfg.peak_lr = 1e-3f;
  cfg.peak_lr_phase2 = 5e-4f;
  cfg.codebook_path = codebook_path;
  cfg.model.height = 8;
  cfg.model.width = 8;
  cfg.model.vocab = 8;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.n_enc_blocks = 1;
  cfg.model.n_dec_blocks = 1;
  cfg.model.proj_hidden = 16;
  cfg.model.proj_out = 8;
  cfg.dataset.kind = DatasetKind::synthetic;
  cfg.dataset.synth.n_per_class = 8;
  cfg.dataset.synth.n_classes = 2;
  cfg.dataset.synth.image_size = 8;
  cfg.dataset.synth.seed = 5;
  return cfg;
}

std::string make_codebook(const TempDir& dir, const ExperimentConfig& cfg) {
  Dataset ds = read_dataset(cfg.dataset);
  std::vector<float> pixels;
  for (const auto& img : ds.images) pixels.insert(pixels.end(), img.data.begin(), img.data.end());
  auto cb = build_codebook(pixels, cfg.model.vocab, 20, cfg.seed);
  std::string path = dir.str() + "/cb.gcbk";
  save_codebook(cb, path);
  return path;
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

std::vector<float> snapshot_params(GcrlModel& model, const std::string& prefix) {
  std::vector<float> out;
  for (auto& p : model.parameters())
    if (p.name.rfind(prefix, 0) == 0) out.insert(out.end(), p.tensor->data().begin(), p.tensor->data().end());
  return out;
}

} // namespace

TEST_CASE("make_batch with no augmentation yields the raw encodes on both streams") {
  TempDir dir("gcrl_trainer_nobatchaug");
  auto cfg = tiny_cfg("");
  cfg.weak_augment.kind = AugKind::none;
  cfg.strong_augment.kind = AugKind::none;
  auto cb_path = make_codebook(dir, cfg);
  auto cb = load_codebook(cb_path);
  Dataset ds = read_dataset(cfg.dataset);
  auto batch = make_batch(ds, cb, {0, 3, 5}, 0, cfg);
  CHECK(batch.view1_tokens.data == batch.view2_tokens.data);
  auto raw = encode(ds.images[3], cb);
  for (int i = 0; i < 64; ++i)
    CHECK(batch.view1_tokens.data[static_cast<std::size_t>(64 + i)] == raw.tokens[static_cast<std::size_t>(i)]);
}

TEST_CASE("make_batch replays exactly for the same (seed, epoch, index)") {
  TempDir dir("gcrl_trainer_batchdet");
  auto cfg = tiny_cfg("");
  auto cb = load_codebook(make_codebook(dir, cfg));
  Dataset ds = read_dataset(cfg.dataset);
  auto b1 = make_batch(ds, cb, {1, 2}, 7, cfg);
  auto b2 = make_batch(ds, cb, {1, 2}, 7, cfg);
  CHECK(b1.view1_tokens.data == b2.view1_tokens.data);
  CHECK(b1.view2_tokens.data == b2.view2_tokens.data);
  auto b3 = make_batch(ds, cb, {1, 2}, 8, cfg);
  CHECK(b1.view2_tokens.data != b3.view2_tokens.data);
  CHECK_THROWS_AS(make_batch(ds, cb, {99}, 0, cfg), ValueError);
}

TEST_CASE("strong and weak streams differ on nearly every textured sample") {
  TempDir dir("gcrl_trainer_streamdiff");
  auto cfg = tiny_cfg("");
  cfg.dataset.synth.n_per_class = 50;
  auto cb = load_codebook(make_codebook(dir, cfg));
  Dataset ds = read_dataset(cfg.dataset);
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto batch = make_batch(ds, cb, all, 0, cfg);
  int differing = 0;
  int D = 64;
  for (std::size_t i = 0; i < all.size(); ++i) {
    bool diff = false;
    for (int t = 0; t < D; ++t)
      diff = diff || batch.view1_tokens.data[i * D + static_cast<std::size_t>(t)] !=
                         batch.view2_tokens.data[i * D + static_cast<std::size_t>(t)];
    differing += diff ? 1 : 0;
  }
  CHECK(differing >= 99); // out of 100
}

TEST_CASE("zero-epoch training writes a valid checkpoint and a header-only log") {
  TempDir dir("gcrl_trainer_zeroepochs");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.epochs = 0;
  auto art = run_training(cfg, dir.str() + "/run");
  auto rows = read_csv_rows(art.metrics_path);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0][0] == "step");
  auto state = load_checkpoint(art.checkpoint_path);
  CHECK(state.global_step == 0);
  CHECK(state.next_epoch == 0);
  CHECK(state.first_token_marginal.size() == 8);
}

TEST_CASE("metrics log honors the clip ceiling, the schedule, and the phase boundary") {
  TempDir dir("gcrl_trainer_metrics");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  auto art = run_training(cfg, dir.str() + "/run");
  auto rows = read_csv_rows(art.metrics_path);
  REQUIRE(rows.size() >= 2);
  CHECK(rows[0] == std::vector<std::string>{"step", "epoch", "phase", "loss", "gen_loss", "con_loss",
                                            "grad_norm", "lr"});
  int steps_per_epoch = 16 / cfg.batch_size;
  PhasePlan plan = make_phase_plan(cfg, steps_per_epoch);
  int phase1_end_step = plan.phase1_epochs * steps_per_epoch;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    std::int64_t step = std::stoll(row[0]);
    CHECK(std::stod(row[6]) <= cfg.grad_clip + 1e-6); // clipped norm
    CHECK(std::stof(row[7]) == doctest::Approx(plan.lr_for(step)).epsilon(1e-6));
    if (step < phase1_end_step) {
      CHECK(row[2] == "1");
      CHECK(row[5].empty()); // contrastive term absent in phase 1
    } else {
      CHECK(row[2] == "2");
      CHECK(!row[5].empty());
    }
  }
  // the contrastive column first appears exactly at the boundary
  CHECK(rows[static_cast<std::size_t>(phase1_end_step)][5].empty());
  CHECK(!rows[static_cast<std::size_t>(phase1_end_step) + 1][5].empty());
}

TEST_CASE("projection head is bit-identical through phase 1 of hybrid training") {
  TempDir dir("gcrl_trainer_projfrozen");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.epochs = 2;
  cfg.phase1_fraction = 1.0f; // the whole run is phase 1
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset ds = read_dataset(cfg.dataset);
  TrainerState state;
  state.model = GcrlModel::init(cfg.model, cfg.seed);
  auto params = state.model.parameters();
  std::vector<std::size_t> sizes;
  std::vector<bool> decay;
  for (auto& p : params) {
    sizes.push_back(p.tensor->numel());
    decay.push_back(p.decay);
  }
  state.optim.init(sizes, decay);
  state.first_token_marginal = first_token_marginal(ds, cb, cfg.model.vocab);
  auto before = snapshot_params(state.model, "proj.");
  auto ln_before = snapshot_params(state.model, "final_ln.");
  PhasePlan plan = make_phase_plan(cfg, 4);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    for (int s = 0; s < 4; ++s) {
      auto batch = make_batch(ds, cb, {0, 1, 2, 3}, epoch, cfg);
      train_step(state, batch, cfg, plan, epoch);
    }
  CHECK(snapshot_params(state.model, "proj.") == before);
  CHECK(snapshot_params(state.model, "final_ln.") == ln_before);
  // other parameters did move
  auto fresh_model = GcrlModel::init(cfg.model, cfg.seed);
  CHECK(snapshot_params(state.model, "enc.") != snapshot_params(fresh_model, "enc."));
}

TEST_CASE("contrastive-only training never touches decoder blocks or the output head") {
  TempDir dir("gcrl_trainer_deconly");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.mode = TrainMode::contrastive_only;
  cfg.epochs = 2;
  auto art = run_training(cfg, dir.str() + "/run");
  auto state = load_checkpoint(art.checkpoint_path);
  auto fresh = GcrlModel::init(cfg.model, cfg.seed);
  CHECK(snapshot_params(state.model, "dec.") == snapshot_params(fresh, "dec."));
  CHECK(snapshot_params(state.model, "dec_final_ln.") == snapshot_params(fresh, "dec_final_ln."));
  CHECK(snapshot_params(state.model, "out_head") == snapshot_params(fresh, "out_head"));
  CHECK(snapshot_params(state.model, "proj.") != snapshot_params(fresh, "proj."));
  // generative column stays empty in the log
  auto rows = read_csv_rows(art.metrics_path);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    CHECK(rows[r][4].empty());
    CHECK(!rows[r][5].empty());
  }
}

TEST_CASE("checkpoints round-trip byte-identically and reject tampering") {
  TempDir dir("gcrl_trainer_ckpt");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.epochs = 1;
  auto art = run_training(cfg, dir.str() + "/run");

  auto state = load_checkpoint(art.checkpoint_path);
  std::string resaved = dir.str() + "/resaved.gckp";
  ExperimentConfig loaded_cfg;
  load_checkpoint(art.checkpoint_path, &loaded_cfg);
  save_checkpoint(resaved, state, loaded_cfg);
  CHECK(io::read_file(art.checkpoint_path) == io::read_file(resaved));

  // tamper: shrink one tensor's shape in the header
  auto bytes = io::read_file(art.checkpoint_path);
  io::Reader r(bytes.data(), bytes.size(), "x");
  r.expect_magic("GCKP");
  r.u32();
  std::uint64_t header_len = r.u64();
  std::string header(reinterpret_cast<const char*>(bytes.data()) + 16, header_len);
  auto j = nlohmann::json::parse(header);
  j["tensors"][0]["shape"] = {1};
  std::string tampered_name = j["tensors"][0]["name"];
  std::string new_header = j.dump();
  // keep the header the same length to avoid re-framing
  REQUIRE(new_header.size() <= header.size());
  new_header.resize(header.size(), ' ');
  std::copy(new_header.begin(), new_header.end(), reinterpret_cast<char*>(bytes.data()) + 16);
  std::string tampered_path = dir.str() + "/tampered.gckp";
  io::write_file(tampered_path, bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(tampered_path), doctest::Contains(tampered_name.c_str()), IoError);
}

TEST_CASE("resuming from a different architecture is rejected with the field name") {
  TempDir dir("gcrl_trainer_crossconfig");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.epochs = 1;
  auto art = run_training(cfg, dir.str() + "/run");
  auto wider = cfg;
  wider.model.d_model = 32;
  wider.resume_path = art.checkpoint_path;
  CHECK_THROWS_WITH_AS(run_training(wider, dir.str() + "/run2"), doctest::Contains("d_model"),
                       ConfigError);
}

TEST_CASE("an interrupted-and-resumed run matches the uninterrupted one bit for bit") {
  TempDir dir("gcrl_trainer_resume");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.epochs = 4;
  cfg.checkpoint_every = 2; // leaves a mid-run snapshot behind
  auto full = run_training(cfg, dir.str() + "/full");

  auto resumed_cfg = cfg;
  resumed_cfg.resume_path = dir.str() + "/full/checkpoint_epoch_2.gckp";
  auto resumed = run_training(resumed_cfg, dir.str() + "/resumed");

  CHECK(io::read_file(full.checkpoint_path) == io::read_file(resumed.checkpoint_path));
}

TEST_CASE("two identical runs produce byte-identical checkpoints and logs") {
  TempDir dir("gcrl_trainer_repro");
  auto cfg = tiny_cfg("");
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.epochs = 2;
  auto a = run_training(cfg, dir.str() + "/a");
  auto b = run_training(cfg, dir.str() + "/b");
  CHECK(io::read_file(a.checkpoint_path) == io::read_file(b.checkpoint_path));
  CHECK(io::read_file(a.metrics_path) == io::read_file(b.metrics_path));
}

TEST_CASE("an overfit run halves its generative loss within 200 steps") {
  TempDir dir("gcrl_trainer_overfit");
  auto cfg = tiny_cfg("");
  cfg.dataset.synth.n_per_class = 16; // 32 images
  cfg.codebook_path = make_codebook(dir, cfg);
  cfg.mode = TrainMode::generative_only;
  cfg.batch_size = 8;       // 4 steps/epoch
  cfg.epochs = 50;          // 200 steps
  cfg.peak_lr = 3e-3f;
  cfg.warmup_epochs = 2;
  cfg.weak_augment.kind = AugKind::none;
  cfg.model.dropout = 0.0f;
  auto art = run_training(cfg, dir.str() + "/run");
  auto rows = read_csv_rows(art.metrics_path);
  double first = std::stod(rows[1][4]);
  double last = std::stod(rows.back()[4]);
  INFO("gen loss went ", first, " -> ", last);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("dense and axial models both learn on the same tiny dataset") {
  TempDir dir("gcrl_trainer_bothlearn");
  auto base = tiny_cfg("");
  base.dataset.synth.n_per_class = 4; // 8 images
  base.codebook_path = make_codebook(dir, base);
  base.mode = TrainMode::generative_only;
  base.batch_size = 8;
  base.epochs = 60;
  base.peak_lr = 3e-3f;
  base.warmup_epochs = 2;
  base.weak_augment.kind = AugKind::none;
  base.model.dropout = 0.0f;
  double ln_k = std::log(8.0);
  for (auto kind : {AttentionKind::dense, AttentionKind::axial}) {
    auto cfg = base;
    cfg.model.attention = kind;
    auto art = run_training(cfg, dir.str() + (kind == AttentionKind::dense ? "/dense" : "/axial"));
    auto state = load_checkpoint(art.checkpoint_path);
    Dataset ds = read_dataset(cfg.dataset);
    Codebook cb = load_codebook(cfg.codebook_path);
    double nll = dataset_nll(state.model, cb, ds);
    double per_token = nll / (state.model.cfg.seq_len() - 1);
    INFO((kind == AttentionKind::dense ? "dense" : "axial"), " per-token NLL ", per_token);
    CHECK(per_token < ln_k);
  }
}
