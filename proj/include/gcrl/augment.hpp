#pragma once

#include <string>
#include <vector>

#include "gcrl/image.hpp"
#include "gcrl/rng.hpp"

namespace gcrl {

enum class AugKind { none, weak, strong };

struct AugPolicy {
  AugKind kind = AugKind::none;
  // weak
  int pad = 4;
  // strong
  float crop_scale_lo = 0.2f;
  float crop_scale_hi = 1.0f;
  float aspect_lo = 0.75f;
  float aspect_hi = 4.0f / 3.0f;
  float jitter_brightness = 0.4f;
  float jitter_contrast = 0.4f;
  float jitter_saturation = 0.4f;
  float jitter_hue = 0.1f;
  float jitter_prob = 0.8f;
  float gray_prob = 0.2f;
  // shared
  float flip_prob = 0.5f;

  void validate() const;
};

AugPolicy weak_policy_default();
AugPolicy strong_policy_default();

// Reflect-pad by `pad` (mirror excluding the edge row/column), crop back to
// the original size at a uniform offset, then horizontal flip with
// probability flip_prob. Requires a square image with pad < side.
Image weak_augment(const Image& image, const AugPolicy& policy, RngStream& rng);

// Deterministic core of weak_augment with the random choices pinned; the
// offsets index into the padded image, so (pad, pad) with no flip is the
// identity.
Image weak_augment_at(const Image& image, int pad, int off_y, int off_x, bool flip);

// Resized crop (area scale and aspect ratio uniform in the policy ranges,
// bilinear resize back), then color jitter with probability jitter_prob
// (brightness, contrast, saturation multiplicative in [1-f, 1+f]; hue shift
// uniform in [-h, h] turns; applied in exactly that order), then grayscale
// with probability gray_prob, then horizontal flip — in exactly that order.
// A degenerate crop is retried up to 10 times and then falls back to the
// full centered frame. `trace`, when given, records each applied stage.
Image strong_augment(const Image& image, const AugPolicy& policy, RngStream& rng,
                     std::vector<std::string>* trace = nullptr);

Image apply_policy(const Image& image, const AugPolicy& policy, RngStream& rng);

// Individual color transforms (exposed for tests).
Image adjust_brightness(const Image& image, float factor);
Image adjust_contrast(const Image& image, float factor);
Image adjust_saturation(const Image& image, float factor);
Image adjust_hue(const Image& image, float turns);
Image to_grayscale(const Image& image);
Image hflip(const Image& image);

} // namespace gcrl
