#include "gcrl/augment.hpp"

#include <algorithm>
#include <cmath>

#include "gcrl/errors.hpp"

namespace gcrl {

namespace {

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

float luma(const float* rgb) { return 0.299f * rgb[0] + 0.587f * rgb[1] + 0.114f * rgb[2]; }

// Mirror index into [0, n) excluding the edge sample, matching reflective
// padding: -1 -> 1, -2 -> 2, n -> n-2.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

void rgb_to_hsv(const float* rgb, float* hsv) {
  float r = rgb[0], g = rgb[1], b = rgb[2];
  float mx = std::max({r, g, b});
  float mn = std::min({r, g, b});
  float d = mx - mn;
  float h = 0.0f;
  if (d > 0.0f) {
    if (mx == r)
      h = (g - b) / d;
    else if (mx == g)
      h = 2.0f + (b - r) / d;
    else
      h = 4.0f + (r - g) / d;
    h /= 6.0f;
    if (h < 0.0f) h += 1.0f;
  }
  hsv[0] = h;
  hsv[1] = mx > 0.0f ? d / mx : 0.0f;
  hsv[2] = mx;
}

void hsv_to_rgb(const float* hsv, float* rgb) {
  float h = hsv[0], s = hsv[1], v = hsv[2];
  float hh = h * 6.0f;
  int sector = static_cast<int>(std::floor(hh)) % 6;
  if (sector < 0) sector += 6;
  float f = hh - std::floor(hh);
  float p = v * (1.0f - s);
  float q = v * (1.0f - s * f);
  float t = v * (1.0f - s * (1.0f - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

} // namespace

void AugPolicy::validate() const {
  auto prob_ok = [](float p) { return p >= 0.0f && p <= 1.0f; };
  if (!prob_ok(jitter_prob) || !prob_ok(gray_prob) || !prob_ok(flip_prob))
    throw ValueError("AugPolicy: probabilities must lie in [0, 1]");
  if (!(crop_scale_lo > 0.0f && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0f))
    throw ValueError("AugPolicy: crop scale must satisfy 0 < lo <= hi <= 1");
  if (pad < 0) throw ValueError("AugPolicy: pad must be non-negative");
}

AugPolicy weak_policy_default() {
  AugPolicy p;
  p.kind = AugKind::weak;
  return p;
}

AugPolicy strong_policy_default() {
  AugPolicy p;
  p.kind = AugKind::strong;
  return p;
}

Image weak_augment_at(const Image& image, int pad, int off_y, int off_x, bool flip) {
  if (image.height != image.width)
    throw ValueError("weak_augment: image must be square, got " + std::to_string(image.height) +
                     "x" + std::to_string(image.width));
  int side = image.height;
  if (pad >= side)
    throw ValueError("weak_augment: pad " + std::to_string(pad) + " must be smaller than side " +
                     std::to_string(side));
  Image out(side, side);
  for (int y = 0; y < side; ++y) {
    int sy = reflect_index(y + off_y - pad, side);
    for (int x = 0; x < side; ++x) {
      int sx = reflect_index(x + off_x - pad, side);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return flip ? hflip(out) : out;
}

Image weak_augment(const Image& image, const AugPolicy& policy, RngStream& rng) {
  int off_y = static_cast<int>(rng.below(static_cast<std::uint32_t>(2 * policy.pad + 1)));
  int off_x = static_cast<int>(rng.below(static_cast<std::uint32_t>(2 * policy.pad + 1)));
  bool flip = rng.bernoulli(policy.flip_prob);
  return weak_augment_at(image, policy.pad, off_y, off_x, flip);
}

Image hflip(const Image& image) {
  Image out(image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
  return out;
}

Image to_grayscale(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels(); ++i) {
    float g = luma(&image.data[i * 3]);
    out.data[i * 3] = out.data[i * 3 + 1] = out.data[i * 3 + 2] = g;
  }
  return out;
}

Image adjust_brightness(const Image& image, float factor) {
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < image.data.size(); ++i) out.data[i] = clamp01(image.data[i] * factor);
  return out;
}

Image adjust_contrast(const Image& image, float factor) {
  double mean = 0.0;
  for (std::size_t i = 0; i < image.pixels(); ++i) mean += luma(&image.data[i * 3]);
  float m = static_cast<float>(mean / static_cast<double>(image.pixels()));
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < image.data.size(); ++i)
    out.data[i] = clamp01(m + (image.data[i] - m) * factor);
  return out;
}

Image adjust_saturation(const Image& image, float factor) {
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels(); ++i) {
    float g = luma(&image.data[i * 3]);
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = clamp01(g + (image.data[i * 3 + c] - g) * factor);
  }
  return out;
}

Image adjust_hue(const Image& image, float turns) {
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels(); ++i) {
    float hsv[3], rgb[3];
    rgb_to_hsv(&image.data[i * 3], hsv);
    hsv[0] += turns;
    hsv[0] -= std::floor(hsv[0]);
    hsv_to_rgb(hsv, rgb);
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = clamp01(rgb[c]);
  }
  return out;
}

Image strong_augment(const Image& image, const AugPolicy& policy, RngStream& rng,
                     std::vector<std::string>* trace) {
  int H = image.height, W = image.width;
  double area = static_cast<double>(H) * W;

  // 1. resized crop
  int crop_h = -1, crop_w = -1, off_y = 0, off_x = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    double target = area * rng.uniform(policy.crop_scale_lo, policy.crop_scale_hi);
    double ratio = rng.uniform(policy.aspect_lo, policy.aspect_hi);
    int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w >= 1 && h >= 1 && w <= W && h <= H) {
      crop_w = w;
      crop_h = h;
      off_y = static_cast<int>(rng.below(static_cast<std::uint32_t>(H - h + 1)));
      off_x = static_cast<int>(rng.below(static_cast<std::uint32_t>(W - w + 1)));
      break;
    }
  }
  if (crop_h < 0) { // fallback: centered full frame
    crop_h = H;
    crop_w = W;
    off_y = 0;
    off_x = 0;
  }
  Image out = bilinear_resize_crop(image, off_y, off_x, crop_h, crop_w, H, W);
  if (trace) trace->push_back("resized_crop");

  // 2. color jitter
  if (rng.bernoulli(policy.jitter_prob)) {
    float fb = static_cast<float>(rng.uniform(1.0 - policy.jitter_brightness, 1.0 + policy.jitter_brightness));
    float fc = static_cast<float>(rng.uniform(1.0 - policy.jitter_contrast, 1.0 + policy.jitter_contrast));
    float fs = static_cast<float>(rng.uniform(1.0 - policy.jitter_saturation, 1.0 + policy.jitter_saturation));
    float fh = static_cast<float>(rng.uniform(-policy.jitter_hue, policy.jitter_hue));
    out = adjust_brightness(out, fb);
    out = adjust_contrast(out, fc);
    out = adjust_saturation(out, fs);
    out = adjust_hue(out, fh);
    if (trace) trace->push_back("color_jitter");
  }

  // 3. grayscale
  if (rng.bernoulli(policy.gray_prob)) {
    out = to_grayscale(out);
    if (trace) trace->push_back("grayscale");
  }

  // 4. horizontal flip
  if (rng.bernoulli(policy.flip_prob)) {
    out = hflip(out);
    if (trace) trace->push_back("hflip");
  }

  for (auto& v : out.data) v = clamp01(v);
  return out;
}

Image apply_policy(const Image& image, const AugPolicy& policy, RngStream& rng) {
  switch (policy.kind) {
    case AugKind::none: return image;
    case AugKind::weak: return weak_augment(image, policy, rng);
    case AugKind::strong: return strong_augment(image, policy, rng);
  }
  throw ValueError("apply_policy: unknown augmentation kind");
}

} // namespace gcrl
