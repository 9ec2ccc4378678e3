#pragma once

#include <cstdint>

namespace gcrl {

// Stream identifiers. Every consumer of randomness opens its own stream so
// that replaying any (seed, purpose, epoch, index) tuple reproduces the exact
// draw sequence regardless of what other components did.
enum class StreamPurpose : std::uint64_t {
  init = 1,       // parameter initialization (index = parameter ordinal)
  dropout = 2,    // dropout masks (epoch, index = global step)
  shuffle = 3,    // epoch-level index shuffling
  aug_weak = 4,   // weak-view augmentation (epoch, index = sample)
  aug_strong = 5, // strong-view augmentation (epoch, index = sample)
  kmeans = 6,     // codebook construction
  synth = 7,      // synthetic dataset generation (epoch slot = class id)
  sample = 8,     // autoregressive sampling (index = image ordinal)
  probe = 9,      // linear-probe training (epoch slot = probe epoch)
  misc = 10,
  lowshot = 11,   // stratified subsampling (epoch slot = class id)
};

// Counter-based splittable stream. The key is derived from
// (seed, purpose, epoch, index) by chained SplitMix64 finalizer mixing, and
// the output sequence is SplitMix64 over that key. Stateless with respect to
// every other stream; two streams with different keys never correlate in
// practice and identical keys replay identical sequences.
class RngStream {
public:
  RngStream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t epoch,
            std::uint64_t index);

  std::uint64_t next_u64();

  // Uniform in [0, 1), 53-bit resolution.
  double next_double();

  double uniform(double lo, double hi);

  // Standard normal via Box-Muller (cosine branch); consumes two u64 draws.
  double normal();

  // Uniform integer in [0, n), unbiased via rejection. n must be > 0.
  std::uint32_t below(std::uint32_t n);

  bool bernoulli(double p) { return next_double() < p; }

private:
  std::uint64_t state_;
};

} // namespace gcrl
