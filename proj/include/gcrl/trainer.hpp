#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gcrl/config.hpp"
#include "gcrl/dataset.hpp"
#include "gcrl/model.hpp"
#include "gcrl/optim.hpp"
#include "gcrl/quantizer.hpp"

namespace gcrl {

// Index-aligned pair of augmented-and-quantized views of one batch. view1 is
// the weak stream (the decoder's input); in contrastive-only mode both
// streams carry strong views.
struct ViewBatch {
  IntArray view1_tokens; // B x H x W
  IntArray view2_tokens; // B x H x W
  std::vector<std::int32_t> labels; // empty when unlabeled
};

struct StepMetrics {
  std::int64_t step = 0;
  int epoch = 0;
  int phase = 1;
  double loss = 0.0;
  std::optional<double> gen_loss;
  std::optional<double> con_loss; // contrastive, or the supervised CE that replaces it
  double grad_norm = 0.0;
  double lr = 0.0;
};

struct TrainerState {
  GcrlModel model;
  OptimState optim;
  std::int64_t global_step = 0;
  int next_epoch = 0;
  std::vector<float> first_token_marginal; // vocab-sized empirical p(token_1)
};

// Per-phase learning-rate plan. Hybrid modes train generative-only for the
// first ceil(phase1_fraction * epochs) epochs and restart warmup+cosine with
// their own peak for the remainder; single-objective modes run one schedule.
struct PhasePlan {
  int phase1_epochs = 0;
  int steps_per_epoch = 0;
  LrSchedule phase1;
  LrSchedule phase2;

  int phase_of_epoch(int epoch) const { return epoch < phase1_epochs ? 1 : 2; }
  float lr_for(std::int64_t global_step) const;
};

PhasePlan make_phase_plan(const ExperimentConfig& cfg, int steps_per_epoch);

ViewBatch make_batch(const Dataset& dataset, const Codebook& codebook,
                     const std::vector<std::size_t>& indices, int epoch,
                     const ExperimentConfig& cfg);

StepMetrics train_step(TrainerState& state, const ViewBatch& batch, const ExperimentConfig& cfg,
                       const PhasePlan& plan, int epoch);

struct TrainArtifacts {
  std::string checkpoint_path;
  std::string metrics_path;
};

TrainArtifacts run_training(const ExperimentConfig& cfg, const std::string& out_dir);

// Checkpoint container: magic "GCKP", u32 version, u64 header length, UTF-8
// JSON header (config snapshot, counters, tensor manifest with name/shape/
// byte offset), then little-endian f32 payloads in manifest order.
void save_checkpoint(const std::string& path, const TrainerState& state,
                     const ExperimentConfig& cfg);
TrainerState load_checkpoint(const std::string& path, ExperimentConfig* cfg_out = nullptr);

// Rejects resuming with a different architecture; names the first differing
// model field.
void verify_resume_compatible(const ExperimentConfig& checkpoint_cfg,
                              const ExperimentConfig& current_cfg);

std::vector<float> first_token_marginal(const Dataset& dataset, const Codebook& codebook, int vocab);

} // namespace gcrl
