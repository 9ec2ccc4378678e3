#include "gcrl/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gcrl/config.hpp"
#include "gcrl/errors.hpp"
#include "gcrl/eval.hpp"
#include "gcrl/ood.hpp"
#include "gcrl/serialize.hpp"
#include "gcrl/trainer.hpp"

namespace gcrl {

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::string checkpoint_path;
  std::string predictions_path;
};

// Timestamps live only here so every other artifact is byte-reproducible.
void write_run_info(const CommonArgs& args, const std::string& command) {
  std::ofstream info(args.out_dir + "/run_info.txt", std::ios::trunc);
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  info << "command: " << command << "\n";
  info << "config: " << args.config_path << "\n";
  info << "timestamp: " << now << "\n";
}

ExperimentConfig load(const CommonArgs& args) {
  if (args.config_path.empty()) throw ConfigError("config", "missing --config");
  return load_config(args.config_path, args.overrides);
}

TrainerState load_model(const CommonArgs& args, ExperimentConfig* cfg_out = nullptr) {
  if (args.checkpoint_path.empty()) throw ConfigError("checkpoint", "missing --checkpoint");
  return load_checkpoint(args.checkpoint_path, cfg_out);
}

Dataset require_eval_dataset(const ExperimentConfig& cfg) {
  if (!cfg.has_eval_dataset) throw ConfigError("eval_dataset", "missing required field");
  return read_dataset(cfg.eval_dataset);
}

Dataset require_ood_dataset(const ExperimentConfig& cfg) {
  if (!cfg.has_ood_dataset) throw ConfigError("ood_dataset", "missing required field");
  return read_dataset(cfg.ood_dataset);
}

int run_build_codebook(const CommonArgs& args) {
  auto cfg = load(args);
  Dataset ds = read_dataset(cfg.dataset);
  if (ds.size() == 0) throw ValueError("build-codebook: dataset is empty");
  // uniform pixel subsample under the global seed
  std::vector<float> pixels;
  std::size_t total = 0;
  for (const auto& img : ds.images) total += img.pixels();
  RngStream rng(cfg.seed, StreamPurpose::kmeans, 0, 1);
  if (total <= cfg.codebook_build.max_pixels) {
    pixels.reserve(total * 3);
    for (const auto& img : ds.images) pixels.insert(pixels.end(), img.data.begin(), img.data.end());
  } else {
    pixels.reserve(cfg.codebook_build.max_pixels * 3);
    for (std::size_t i = 0; i < cfg.codebook_build.max_pixels; ++i) {
      const Image& img = ds.images[rng.below(static_cast<std::uint32_t>(ds.size()))];
      std::size_t p = rng.below(static_cast<std::uint32_t>(img.pixels()));
      for (int c = 0; c < 3; ++c) pixels.push_back(img.data[p * 3 + static_cast<std::size_t>(c)]);
    }
  }
  auto cb = build_codebook(pixels, cfg.codebook_build.k, cfg.codebook_build.max_iters, cfg.seed);
  save_codebook(cb, args.out_dir + "/codebook.gcbk");
  std::cout << "codebook: K=" << cb.k << " -> " << args.out_dir << "/codebook.gcbk\n";
  return 0;
}

int run_train(const CommonArgs& args) {
  auto cfg = load(args);
  auto art = run_training(cfg, args.out_dir);
  std::cout << "train: checkpoint " << art.checkpoint_path << ", metrics " << art.metrics_path << "\n";
  return 0;
}

int run_eval_linear(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset train_ds = read_dataset(cfg.dataset);
  Dataset test_ds = require_eval_dataset(cfg);
  auto pos = rep_position_from_string(cfg.eval.rep_position);
  auto train_reps = reps_of_dataset(state.model, cb, train_ds, pos);
  auto test_reps = reps_of_dataset(state.model, cb, test_ds, pos);
  ProbeOptions opt{cfg.eval.probe_epochs, cfg.eval.probe_lr, cfg.eval.probe_weight_decay,
                   cfg.eval.probe_batch, cfg.seed};
  auto res = linear_probe(train_reps, test_reps, opt);
  CsvWriter out(args.out_dir + "/linear_eval.csv", "position,accuracy");
  out.row({cfg.eval.rep_position, format_float(res.accuracy)});
  std::cout << "linear probe accuracy: " << res.accuracy << "\n";
  return 0;
}

int run_eval_bpd(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset ds = cfg.has_eval_dataset ? read_dataset(cfg.eval_dataset) : read_dataset(cfg.dataset);
  double nll = dataset_nll(state.model, cb, ds);
  double bits = bpd_from_nll(nll, state.model.cfg.seq_len());
  CsvWriter out(args.out_dir + "/bpd.csv", "nll_nats_per_image,bpd");
  out.row({format_float(nll), format_float(bits)});
  std::cout << "bpd: " << bits << "\n";
  return 0;
}

int run_eval_knn(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset train_ds = read_dataset(cfg.dataset);
  Dataset test_ds = require_eval_dataset(cfg);
  auto pos = rep_position_from_string(cfg.eval.rep_position);
  auto train_reps = reps_of_dataset(state.model, cb, train_ds, pos);
  auto test_reps = reps_of_dataset(state.model, cb, test_ds, pos);
  double err = knn_probe(train_reps, test_reps, cfg.eval.knn_k);
  CsvWriter out(args.out_dir + "/knn.csv", "k,error_rate");
  out.row({std::to_string(cfg.eval.knn_k), format_float(err)});
  std::cout << cfg.eval.knn_k << "-NN error rate: " << err << "\n";
  return 0;
}

void write_ece_outputs(const CommonArgs& args, const EceResult& res) {
  CsvWriter out(args.out_dir + "/ece.csv", "n_bins,ece");
  out.row({std::to_string(res.bins.n_bins), format_float(res.value)});
  CsvWriter bins(args.out_dir + "/reliability_bins.csv", "bin,lo,hi,count,mean_confidence,accuracy");
  for (int b = 0; b < res.bins.n_bins; ++b) {
    double lo = static_cast<double>(b) / res.bins.n_bins;
    double hi = static_cast<double>(b + 1) / res.bins.n_bins;
    bins.row({std::to_string(b), format_float(lo), format_float(hi),
              std::to_string(res.bins.count[static_cast<std::size_t>(b)]),
              format_float(res.bins.mean_confidence[static_cast<std::size_t>(b)]),
              format_float(res.bins.accuracy[static_cast<std::size_t>(b)])});
  }
}

int run_eval_ece(const CommonArgs& args) {
  auto cfg = load(args);
  std::vector<float> confidences;
  std::vector<std::uint8_t> correct;
  if (!args.predictions_path.empty()) {
    std::ifstream f(args.predictions_path);
    if (!f) throw IoError("eval-ece: cannot open '" + args.predictions_path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "sample_id,confidence,correct")
      throw IoError("eval-ece: '" + args.predictions_path +
                    "' must start with header 'sample_id,confidence,correct'");
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string id, conf, corr;
      if (!std::getline(ss, id, ',') || !std::getline(ss, conf, ',') || !std::getline(ss, corr))
        throw IoError("eval-ece: malformed row '" + line + "'");
      confidences.push_back(std::stof(conf));
      correct.push_back(corr == "1" ? 1 : 0);
    }
  } else {
    auto state = load_model(args);
    Codebook cb = load_codebook(cfg.codebook_path);
    Dataset train_ds = read_dataset(cfg.dataset);
    Dataset test_ds = require_eval_dataset(cfg);
    auto pos = rep_position_from_string(cfg.eval.rep_position);
    auto train_reps = reps_of_dataset(state.model, cb, train_ds, pos);
    auto test_reps = reps_of_dataset(state.model, cb, test_ds, pos);
    ProbeOptions opt{cfg.eval.probe_epochs, cfg.eval.probe_lr, cfg.eval.probe_weight_decay,
                     cfg.eval.probe_batch, cfg.seed};
    auto probe = linear_probe(train_reps, test_reps, opt);
    confidences = probe.confidences;
    correct = probe.correct;
  }
  auto res = ece(confidences, correct, cfg.eval.ece_bins);
  write_ece_outputs(args, res);
  std::cout << "ece: " << res.value << "\n";
  return 0;
}

int run_eval_lowshot(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset train_ds = read_dataset(cfg.dataset);
  Dataset test_ds = require_eval_dataset(cfg);
  auto pos = rep_position_from_string(cfg.eval.rep_position);
  auto train_reps = reps_of_dataset(state.model, cb, train_ds, pos);
  auto test_reps = reps_of_dataset(state.model, cb, test_ds, pos);
  ProbeOptions opt{cfg.eval.probe_epochs, cfg.eval.probe_lr, cfg.eval.probe_weight_decay,
                   cfg.eval.probe_batch, cfg.seed};
  auto results = lowshot_probe(train_reps, test_reps, cfg.eval.lowshot_fraction,
                               cfg.eval.lowshot_seeds, opt, cfg.eval.ece_bins);
  CsvWriter out(args.out_dir + "/lowshot.csv", "seed,accuracy,ece");
  double acc_mean = 0.0, ece_mean = 0.0;
  for (const auto& r : results) {
    out.row({std::to_string(r.seed), format_float(r.accuracy), format_float(r.ece)});
    acc_mean += r.accuracy;
    ece_mean += r.ece;
  }
  acc_mean /= static_cast<double>(results.size());
  ece_mean /= static_cast<double>(results.size());
  double acc_var = 0.0, ece_var = 0.0;
  for (const auto& r : results) {
    acc_var += (r.accuracy - acc_mean) * (r.accuracy - acc_mean);
    ece_var += (r.ece - ece_mean) * (r.ece - ece_mean);
  }
  std::size_t denom = results.size() > 1 ? results.size() - 1 : 1;
  CsvWriter summary(args.out_dir + "/lowshot_summary.csv", "metric,mean,std");
  summary.row({"accuracy", format_float(acc_mean), format_float(std::sqrt(acc_var / denom))});
  summary.row({"ece", format_float(ece_mean), format_float(std::sqrt(ece_var / denom))});
  std::cout << "lowshot accuracy mean: " << acc_mean << "\n";
  return 0;
}

int run_sample(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  auto grids = sample_tokens(state.model, state.first_token_marginal, cfg.eval.sample_count,
                             cfg.eval.sample_temperature, cfg.seed);
  for (std::size_t i = 0; i < grids.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04zu.ppm", i);
    write_ppm(decode(grids[i], cb), args.out_dir + "/" + name);
  }
  std::cout << "sampled " << grids.size() << " images at temperature " << cfg.eval.sample_temperature
            << "\n";
  return 0;
}

int run_ood_sup(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset train_ds = read_dataset(cfg.dataset);
  Dataset in_ds = require_eval_dataset(cfg);
  Dataset out_ds = require_ood_dataset(cfg);
  auto pos = rep_position_from_string(cfg.eval.rep_position);
  auto train_reps = reps_of_dataset(state.model, cb, train_ds, pos);
  auto in_reps = reps_of_dataset(state.model, cb, in_ds, pos);
  auto out_reps = reps_of_dataset(state.model, cb, out_ds, pos);
  auto gaussians = fit_class_gaussians(train_reps);
  OodScores scores;
  CsvWriter csv(args.out_dir + "/ood_scores.csv", "sample_id,split,score");
  for (int i = 0; i < in_reps.n; ++i) {
    double s = score_supervised(std::span<const float>(in_reps.row(i), static_cast<std::size_t>(in_reps.d)), gaussians);
    scores.in_scores.push_back(s);
    csv.row({std::to_string(i), "in", format_float(s)});
  }
  for (int i = 0; i < out_reps.n; ++i) {
    double s = score_supervised(std::span<const float>(out_reps.row(i), static_cast<std::size_t>(out_reps.d)), gaussians);
    scores.out_scores.push_back(s);
    csv.row({std::to_string(i), "out", format_float(s)});
  }
  CsvWriter metrics(args.out_dir + "/ood_metrics.csv", "score,auroc,auprc");
  metrics.row({"supervised", format_float(auroc(scores)), format_float(auprc(scores))});
  std::cout << "supervised ood auroc: " << auroc(scores) << "\n";
  return 0;
}

int run_ood_unsup(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  Dataset in_ds = require_eval_dataset(cfg);
  Dataset out_ds = require_ood_dataset(cfg);
  OodScores scores;
  CsvWriter csv(args.out_dir + "/ood_scores.csv", "sample_id,split,score");
  for (std::size_t i = 0; i < in_ds.size(); ++i) {
    double s = score_unsupervised(state.model, encode(in_ds.images[i], cb));
    scores.in_scores.push_back(s);
    csv.row({std::to_string(i), "in", format_float(s)});
  }
  for (std::size_t i = 0; i < out_ds.size(); ++i) {
    double s = score_unsupervised(state.model, encode(out_ds.images[i], cb));
    scores.out_scores.push_back(s);
    csv.row({std::to_string(i), "out", format_float(s)});
  }
  CsvWriter metrics(args.out_dir + "/ood_metrics.csv", "score,auroc,auprc");
  metrics.row({"unsupervised", format_float(auroc(scores)), format_float(auprc(scores))});
  std::cout << "unsupervised ood auroc: " << auroc(scores) << "\n";
  return 0;
}

int run_extract_reps(const CommonArgs& args) {
  auto cfg = load(args);
  auto state = load_model(args);
  Codebook cb = load_codebook(cfg.codebook_path);
  auto pos = rep_position_from_string(cfg.eval.rep_position);
  auto dump = [&](const Dataset& ds, const std::string& name) {
    auto reps = reps_of_dataset(state.model, cb, ds, pos);
    RepFile file;
    file.n = static_cast<std::uint32_t>(reps.n);
    file.d = static_cast<std::uint32_t>(reps.d);
    file.values = reps.values;
    if (!reps.labels.empty()) file.labels = reps.labels;
    save_reps(file, args.out_dir + "/" + name);
  };
  dump(read_dataset(cfg.dataset), "reps_train.grep");
  if (cfg.has_eval_dataset) dump(read_dataset(cfg.eval_dataset), "reps_eval.grep");
  std::cout << "representations written to " << args.out_dir << "\n";
  return 0;
}

int run_bench(const CommonArgs& args) {
  auto cfg = load(args);
  int reps = cfg.bench.repetitions;
  if (reps < 1) throw ConfigError("bench.repetitions", "must be at least 1");
  int B = cfg.bench.batch_size;
  CsvWriter out(args.out_dir + "/bench.csv", "attention_kind,images_per_s,score_entries_per_image,reps");
  for (auto kind : {AttentionKind::dense, AttentionKind::axial}) {
    ModelConfig mc = cfg.model;
    mc.attention = kind;
    auto model = GcrlModel::init(mc, cfg.seed);
    ForwardCtx ctx;
    IntArray tokens = IntArray::zeros({B, mc.height, mc.width});
    RngStream rng(cfg.seed, StreamPurpose::misc, 0, 0);
    for (auto& t : tokens.data) t = static_cast<std::int32_t>(rng.below(static_cast<std::uint32_t>(mc.vocab)));

    model.encode_representation(tokens, ctx); // warm-up
    reset_attention_entries();
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) model.encode_representation(tokens, ctx);
    auto t1 = std::chrono::steady_clock::now();
    std::uint64_t entries = attention_entries() / (static_cast<std::uint64_t>(reps) * B);

    std::uint64_t H = static_cast<std::uint64_t>(mc.height), W = static_cast<std::uint64_t>(mc.width);
    std::uint64_t D = H * W;
    std::uint64_t expected = static_cast<std::uint64_t>(mc.n_heads) * mc.n_enc_blocks *
                             (kind == AttentionKind::dense ? D * D : H * W * W + W * H * H + H * W * W);
    if (entries != expected)
      throw ValueError("bench: instrumented count " + std::to_string(entries) +
                       " disagrees with the closed form " + std::to_string(expected));
    double secs = std::chrono::duration<double>(t1 - t0).count();
    double ips = static_cast<double>(reps) * B / secs;
    out.row({kind == AttentionKind::dense ? "dense" : "axial", format_float(ips),
             std::to_string(entries), std::to_string(reps)});
  }
  std::cout << "bench written to " << args.out_dir << "/bench.csv\n";
  return 0;
}

int run_gen_synth(const CommonArgs& args) {
  auto cfg = load(args);
  if (cfg.dataset.kind != DatasetKind::synthetic)
    throw ConfigError("dataset.kind", "gen-synth requires a synthetic dataset spec");
  Dataset ds = generate_synthetic(cfg.dataset.synth);
  ImageDump dump;
  dump.images = std::move(ds.images);
  dump.labels = ds.labels;
  save_image_dump(dump, args.out_dir + "/synth.gimg");
  std::cout << "wrote " << dump.images.size() << " images to " << args.out_dir << "/synth.gimg\n";
  return 0;
}

} // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"generative-contrastive representation learning workbench"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string command;
  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const CommonArgs&);
    bool needs_checkpoint;
  };
  const Sub subs[] = {
      {"build-codebook", "fit a k-means color codebook from the configured dataset", run_build_codebook, false},
      {"train", "run the configured training loop", run_train, false},
      {"eval-linear", "linear probe on frozen representations", run_eval_linear, true},
      {"eval-bpd", "bits per token on the quantized space", run_eval_bpd, true},
      {"eval-knn", "k-nearest-neighbour probe", run_eval_knn, true},
      {"eval-ece", "expected calibration error and reliability bins", run_eval_ece, false},
      {"eval-lowshot", "low-shot linear probes over stratified subsamples", run_eval_lowshot, true},
      {"sample", "ancestral sampling to PPM images", run_sample, true},
      {"ood-sup", "class-conditional-Gaussian OOD scores", run_ood_sup, true},
      {"ood-unsup", "likelihood-gradient-magnitude OOD scores", run_ood_unsup, true},
      {"extract-reps", "write representation files for the configured datasets", run_extract_reps, true},
      {"bench", "dense-vs-axial attention throughput and entry counts", run_bench, false},
      {"gen-synth", "write the configured synthetic dataset to an image dump", run_gen_synth, false},
  };
  for (const auto& sub : subs) {
    CLI::App* s = app.add_subcommand(sub.name, sub.help);
    s->add_option("--config", args.config_path, "JSON experiment config");
    s->add_option("--set", args.overrides, "config override key=value (repeatable)");
    s->add_option("--out", args.out_dir, "output directory");
    if (sub.needs_checkpoint)
      s->add_option("--checkpoint", args.checkpoint_path, "checkpoint file (GCKP)");
    if (std::string(sub.name) == "eval-ece")
      s->add_option("--checkpoint", args.checkpoint_path, "checkpoint file (GCKP)"),
          s->add_option("--predictions", args.predictions_path,
                        "CSV of sample_id,confidence,correct to score directly");
    s->callback([&, run = sub.run, name = sub.name] {
      command = name;
      std::filesystem::create_directories(args.out_dir);
      write_run_info(args, name);
      run(args);
    });
  }

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e); // --help
    std::cerr << "error: usage: " << e.what() << "\n";
    std::cerr << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
}

} // namespace gcrl
