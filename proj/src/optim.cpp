#include "gcrl/optim.hpp"

#include <cmath>

#include "gcrl/errors.hpp"

namespace gcrl {

void OptimState::init(const std::vector<std::size_t>& sizes, const std::vector<bool>& decay) {
  if (sizes.size() != decay.size())
    throw ShapeError("OptimState::init: sizes and decay flags disagree");
  m.clear();
  v.clear();
  decay_mask.clear();
  m.reserve(sizes.size());
  v.reserve(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    m.emplace_back(sizes[i], 0.0f);
    v.emplace_back(sizes[i], 0.0f);
    decay_mask.push_back(decay[i] ? 1 : 0);
  }
  step = 0;
}

float clip_global_norm(std::span<GradRef> grads, float max_norm) {
  if (max_norm <= 0.0f) throw ValueError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads) {
    for (float x : g.grad) {
      if (!std::isfinite(x))
        throw ValueError("clip_global_norm: non-finite gradient in parameter '" + g.name + "'");
      sq += static_cast<double>(x) * static_cast<double>(x);
    }
  }
  double norm = std::sqrt(sq);
  if (norm <= static_cast<double>(max_norm)) return 1.0f;
  // Tiny shrink keeps the rescaled norm strictly under max_norm after f32
  // rounding, which makes a second application a no-op.
  double factor = static_cast<double>(max_norm) / norm * (1.0 - 2.5e-7);
  float f = static_cast<float>(factor);
  for (auto& g : grads)
    for (float& x : g.grad) x *= f;
  return f;
}

void adamw_step(std::span<ParamRef> params, OptimState& state, const AdamWHyper& hyper, float lr) {
  state.step += 1;
  double t = static_cast<double>(state.step);
  float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta1), t));
  float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(hyper.beta2), t));
  for (auto& p : params) {
    if (p.slot >= state.slots())
      throw ShapeError("adamw_step: slot " + std::to_string(p.slot) + " out of range for parameter '" +
                       p.name + "'");
    auto& m = state.m[p.slot];
    auto& v = state.v[p.slot];
    if (m.size() != p.value.size() || p.grad.size() != p.value.size())
      throw ShapeError("adamw_step: state/gradient size mismatch for parameter '" + p.name + "'");
    bool decay = state.decay_mask[p.slot] != 0 && hyper.weight_decay != 0.0f;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      float g = p.grad[i];
      m[i] = hyper.beta1 * m[i] + (1.0f - hyper.beta1) * g;
      v[i] = hyper.beta2 * v[i] + (1.0f - hyper.beta2) * g * g;
      float m_hat = m[i] / bc1;
      float v_hat = v[i] / bc2;
      float upd = m_hat / (std::sqrt(v_hat) + hyper.eps);
      if (decay) upd += hyper.weight_decay * p.value[i];
      p.value[i] -= lr * upd;
    }
  }
}

float lr_at(std::int64_t step, const LrSchedule& schedule) {
  if (schedule.steps_per_epoch <= 0 || schedule.total_epochs < 0)
    throw ValueError("lr_at: schedule has no steps");
  std::int64_t warm = schedule.warmup_steps();
  std::int64_t total = schedule.total_steps();
  if (warm > total) throw ValueError("lr_at: warmup exceeds total steps");
  if (step < 0 || step > total)
    throw ValueError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(total));
  if (step <= warm) {
    if (warm == 0) return step == 0 ? 0.0f : schedule.peak_rate;
    return schedule.peak_rate * static_cast<float>(static_cast<double>(step) / static_cast<double>(warm));
  }
  double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return schedule.peak_rate * static_cast<float>(0.5 * (1.0 + std::cos(M_PI * progress)));
}

} // namespace gcrl
