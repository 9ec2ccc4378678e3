#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gcrl/tensor.hpp"

namespace gcrl {

struct AdamWHyper {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-4f;
};

// Moment buffers for a fixed parameter registry. Slot i is shape-congruent
// with parameter i; decay_mask[i] is false for layer-norm gains/biases,
// embedding tables and bias vectors.
struct OptimState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::vector<std::uint8_t> decay_mask;
  std::int64_t step = 0;

  void init(const std::vector<std::size_t>& sizes, const std::vector<bool>& decay);
  std::size_t slots() const { return m.size(); }
};

// One parameter as the optimizer sees it: values updated in place, gradient
// read-only, slot indexing into OptimState.
struct ParamRef {
  std::string name;
  std::span<float> value;
  std::span<const float> grad;
  std::size_t slot;
};

struct GradRef {
  std::string name;
  std::span<float> grad;
};

// Global-norm clipping. Returns the applied factor: 1.0 when the norm is
// within max_norm, otherwise max_norm/norm shrunk by one part per million so
// that the clipped norm is strictly below max_norm and a second application
// is a bit-exact no-op. Norm accumulation runs in double.
float clip_global_norm(std::span<GradRef> grads, float max_norm);

// Bias-corrected decoupled-weight-decay Adam update over the given params.
// Decay applies only where the state's decay_mask is set. The step counter
// increments once per call.
void adamw_step(std::span<ParamRef> params, OptimState& state, const AdamWHyper& hyper, float lr);

// Linear ramp 0 -> peak over the warmup steps, then cosine decay peak -> 0
// over the remainder.
struct LrSchedule {
  float peak_rate = 0.0f;
  int warmup_epochs = 0;
  int total_epochs = 0;
  int steps_per_epoch = 0;

  std::int64_t warmup_steps() const {
    return static_cast<std::int64_t>(warmup_epochs) * steps_per_epoch;
  }
  std::int64_t total_steps() const {
    return static_cast<std::int64_t>(total_epochs) * steps_per_epoch;
  }
};

float lr_at(std::int64_t step, const LrSchedule& schedule);

} // namespace gcrl
