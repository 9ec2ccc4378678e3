#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gcrl/image.hpp"
#include "gcrl/tensor.hpp"

namespace gcrl {

// K centroid colors in RGB [0,1]. Centroids are pairwise distinct after
// training so that encode(decode(t)) == t for every valid token.
struct Codebook {
  int k = 0;
  std::vector<float> centroids; // K x 3
  std::string source_meta;

  const float* color(int code) const { return centroids.data() + static_cast<std::size_t>(code) * 3; }
};

// H x W grid of token ids in raster order (row-major, left to right, top to
// bottom). The flattened length H*W is the autoregressive sequence length.
struct TokenGrid {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> tokens;

  TokenGrid() = default;
  TokenGrid(int h, int w) : height(h), width(w), tokens(static_cast<std::size_t>(h) * w, 0) {}
  int seq_len() const { return height * width; }
};

// Lloyd's k-means over RGB pixels with k-means++ seeding from the given seed.
// Stops after max_iters or when no assignment changes; an emptied cluster is
// re-seeded from the point farthest from its assigned centroid. If
// `mse_trace` is given it receives the mean squared quantization error after
// every iteration.
Codebook build_codebook(const std::vector<float>& pixels, int k, int max_iters,
                        std::uint64_t seed, std::vector<double>* mse_trace = nullptr);

// Nearest centroid per pixel in squared RGB distance; ties go to the lowest
// code index. Pixel values may stray from [0,1] by at most 1e-6.
TokenGrid encode(const Image& image, const Codebook& codebook);
Image decode(const TokenGrid& tokens, const Codebook& codebook);

int nearest_code(const float* rgb, const Codebook& codebook);

} // namespace gcrl
