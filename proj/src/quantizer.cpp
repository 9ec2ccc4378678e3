#include "gcrl/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gcrl/errors.hpp"
#include "gcrl/rng.hpp"

namespace gcrl {

namespace {

double sqdist(const float* a, const float* b) {
  double d0 = static_cast<double>(a[0]) - b[0];
  double d1 = static_cast<double>(a[1]) - b[1];
  double d2 = static_cast<double>(a[2]) - b[2];
  return d0 * d0 + d1 * d1 + d2 * d2;
}

} // namespace

int nearest_code(const float* rgb, const Codebook& cb) {
  int best = 0;
  double best_d = sqdist(rgb, cb.color(0));
  for (int c = 1; c < cb.k; ++c) {
    double d = sqdist(rgb, cb.color(c));
    if (d < best_d) { // strict: ties keep the lowest index
      best_d = d;
      best = c;
    }
  }
  return best;
}

Codebook build_codebook(const std::vector<float>& pixels, int k, int max_iters,
                        std::uint64_t seed, std::vector<double>* mse_trace) {
  if (k <= 0) throw ValueError("build_codebook: K must be positive");
  if (pixels.size() % 3 != 0) throw ShapeError("build_codebook: pixel array is not N x 3");
  std::size_t n = pixels.size() / 3;
  if (n < static_cast<std::size_t>(k))
    throw ValueError("build_codebook: need at least K=" + std::to_string(k) + " pixels, got " +
                     std::to_string(n));
  for (float v : pixels)
    if (v < -1e-6f || v > 1.0f + 1e-6f)
      throw ValueError("build_codebook: pixel value " + std::to_string(v) + " outside [0, 1]");

  Codebook cb;
  cb.k = k;
  cb.centroids.resize(static_cast<std::size_t>(k) * 3);
  RngStream rng(seed, StreamPurpose::kmeans, 0, 0);

  // k-means++ seeding
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(static_cast<std::uint32_t>(n));
  std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(first * 3), 3, cb.centroids.begin());
  for (int c = 1; c < k; ++c) {
    const float* prev = cb.color(c - 1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_d[i] = std::min(min_d[i], sqdist(&pixels[i * 3], prev));
      total += min_d[i];
    }
    std::size_t chosen;
    if (total <= 0.0) {
      chosen = rng.below(static_cast<std::uint32_t>(n));
    } else {
      double target = rng.next_double() * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_d[i];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
    }
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(chosen * 3), 3,
                cb.centroids.begin() + static_cast<std::ptrdiff_t>(c) * 3);
  }

  // Lloyd iterations
  std::vector<int> assign(n, -1);
  std::vector<double> sums(static_cast<std::size_t>(k) * 3);
  std::vector<std::size_t> counts(static_cast<std::size_t>(k));
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    double sq_err = 0.0;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      int c = nearest_code(&pixels[i * 3], cb);
      sq_err += sqdist(&pixels[i * 3], cb.color(c));
      if (c != assign[i]) {
        assign[i] = c;
        changed = true;
      }
      counts[static_cast<std::size_t>(c)] += 1;
      for (int j = 0; j < 3; ++j) sums[static_cast<std::size_t>(c) * 3 + j] += pixels[i * 3 + j];
    }
    if (mse_trace) mse_trace->push_back(sq_err / static_cast<double>(n));
    if (!changed && iter > 0) break;
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        // re-seed from the point farthest from its current centroid
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          double d = sqdist(&pixels[i * 3], cb.color(assign[i]));
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(far * 3), 3,
                    cb.centroids.begin() + static_cast<std::ptrdiff_t>(c) * 3);
      } else {
        double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        for (int j = 0; j < 3; ++j)
          cb.centroids[static_cast<std::size_t>(c) * 3 + j] =
              static_cast<float>(sums[static_cast<std::size_t>(c) * 3 + j] * inv);
      }
    }
  }

  // Duplicate centroids would break encode/decode idempotence: re-seed and
  // refine, then as a last resort nudge by one ulp-scale epsilon.
  for (int attempt = 0; attempt < 4; ++attempt) {
    bool dup = false;
    for (int a = 0; a < k && !dup; ++a)
      for (int b = a + 1; b < k && !dup; ++b)
        if (std::equal(cb.color(a), cb.color(a) + 3, cb.color(b))) dup = true;
    if (!dup) break;
    for (int a = 0; a < k; ++a)
      for (int b = a + 1; b < k; ++b)
        if (std::equal(cb.color(a), cb.color(a) + 3, cb.color(b))) {
          float* cb_b = cb.centroids.data() + static_cast<std::size_t>(b) * 3;
          float eps = 1.0f / (1 << 20) * static_cast<float>(attempt + 1);
          cb_b[0] = std::clamp(cb_b[0] + eps * static_cast<float>(b + 1), 0.0f, 1.0f);
          cb_b[1] = std::clamp(cb_b[1] - eps, 0.0f, 1.0f);
        }
  }
  cb.source_meta = "kmeans(seed=" + std::to_string(seed) + ", iters<=" + std::to_string(max_iters) +
                   ", n=" + std::to_string(n) + ")";
  return cb;
}

TokenGrid encode(const Image& image, const Codebook& cb) {
  if (cb.k <= 0) throw ValueError("encode: empty codebook");
  for (float v : image.data)
    if (v < -1e-6f || v > 1.0f + 1e-6f)
      throw ValueError("encode: pixel value " + std::to_string(v) + " outside [0, 1]");
  TokenGrid grid(image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      grid.tokens[static_cast<std::size_t>(y) * image.width + x] =
          nearest_code(&image.data[(static_cast<std::size_t>(y) * image.width + x) * 3], cb);
  return grid;
}

Image decode(const TokenGrid& grid, const Codebook& cb) {
  Image img(grid.height, grid.width);
  for (std::size_t i = 0; i < grid.tokens.size(); ++i) {
    std::int32_t t = grid.tokens[i];
    if (t < 0 || t >= cb.k)
      throw ValueError("decode: token " + std::to_string(t) + " out of range [0, " +
                       std::to_string(cb.k) + ")");
    std::copy_n(cb.color(t), 3, img.data.begin() + static_cast<std::ptrdiff_t>(i) * 3);
  }
  return img;
}

} // namespace gcrl
