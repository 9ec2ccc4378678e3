#include "gcrl/rng.hpp"

#include <cmath>

#include "gcrl/errors.hpp"

namespace gcrl {

namespace {

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

} // namespace

RngStream::RngStream(std::uint64_t seed, StreamPurpose purpose,
                     std::uint64_t epoch, std::uint64_t index) {
  std::uint64_t k = mix64(seed + kGamma);
  k = mix64(k ^ (static_cast<std::uint64_t>(purpose) + kGamma));
  k = mix64(k ^ (epoch + kGamma));
  k = mix64(k ^ (index + kGamma));
  state_ = k;
}

std::uint64_t RngStream::next_u64() {
  state_ += kGamma;
  return mix64(state_);
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

double RngStream::normal() {
  // u1 in (0, 1] so the log is finite.
  double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  double u2 = next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint32_t RngStream::below(std::uint32_t n) {
  if (n == 0) throw ValueError("RngStream::below: n must be positive");
  std::uint64_t bound = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= bound);
  return static_cast<std::uint32_t>(x % n);
}

} // namespace gcrl
