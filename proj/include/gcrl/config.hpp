#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "gcrl/augment.hpp"
#include "gcrl/dataset.hpp"
#include "gcrl/losses.hpp"
#include "gcrl/model.hpp"

namespace gcrl {

enum class TrainMode { gcrl, generative_only, contrastive_only, supervised_hybrid };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s, const std::string& field);

struct EvalConfig {
  float probe_lr = 0.01f;
  int probe_epochs = 100;
  int probe_batch = 512;
  float probe_weight_decay = 1e-4f;
  int knn_k = 5;
  int ece_bins = 10;
  float lowshot_fraction = 0.1f;
  std::vector<int> lowshot_seeds = {0, 1, 2, 3, 4};
  int sample_count = 16;
  float sample_temperature = 1.0f;
  std::string rep_position = "half"; // half | last
};

struct CodebookBuildConfig {
  int k = 16;
  int max_iters = 50;
  std::size_t max_pixels = 1000000; // uniform pixel subsample cap
};

struct BenchConfig {
  int repetitions = 100;
  int batch_size = 1;
};

struct ExperimentConfig {
  std::string note;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::gcrl;
  int epochs = 100;
  int batch_size = 32;
  float phase1_fraction = 0.5f;
  int warmup_epochs = 5;
  float peak_lr = 1.6e-3f;
  float peak_lr_phase2 = -1.0f; // < 0 means "same as peak_lr"
  float weight_decay = 1e-4f;
  float grad_clip = 1.0f;
  LossWeights weights;
  int checkpoint_every = 0; // epochs between periodic checkpoints; 0 = final only
  std::string codebook_path;
  std::string resume_path;
  ModelConfig model;
  DatasetSpec dataset;      // training set
  DatasetSpec eval_dataset; // held-out set
  bool has_eval_dataset = false;
  DatasetSpec ood_dataset;  // out-of-distribution set for the ood subcommands
  bool has_ood_dataset = false;
  AugPolicy weak_augment = weak_policy_default();
  AugPolicy strong_augment = strong_policy_default();
  EvalConfig eval;
  CodebookBuildConfig codebook_build;
  BenchConfig bench;

  float phase2_peak() const { return peak_lr_phase2 < 0.0f ? peak_lr : peak_lr_phase2; }
  int phase1_epochs() const {
    return static_cast<int>(std::ceil(static_cast<double>(phase1_fraction) * epochs));
  }
  void validate() const;
};

// Strict parse: every field checked, unknown keys rejected with their dotted
// path. `overrides` are key=value pairs applied onto the JSON before parsing
// (dotted paths address nested fields; values parse as JSON with a string
// fallback).
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides);

nlohmann::json config_to_json(const ExperimentConfig& cfg);

} // namespace gcrl
