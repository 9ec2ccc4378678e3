#pragma once

#include <cmath>
#include <cstdint>

#include "gcrl/tensor.hpp"

namespace gcrl {

struct LossWeights {
  float alpha = 1.0f;       // generative weight
  float beta = 1.0f;        // contrastive weight
  float temperature = 0.2f; // contrastive temperature

  void validate() const {
    if (alpha < 0.0f || beta < 0.0f) throw ValueError("LossWeights: weights must be non-negative");
    if (temperature <= 0.0f) throw ValueError("LossWeights: temperature must be positive");
  }
};

// Autoregressive negative log-likelihood in nats per image, batch mean.
// Token 1 of each grid is never predicted: logits at raster position t
// parameterize the distribution of token t+1, so the final position's logits
// are computed but unused. targets is the B x H x W (or B x D) id array the
// logits were produced from.
template <typename S>
TensorT<S> generative_nll(const TensorT<S>& logits, const IntArray& targets) {
  if (logits.rank() != 3) throw ShapeError("generative_nll: logits must be B x D x K, got " + shape_str(logits.shape()));
  int B = logits.dim(0), D = logits.dim(1);
  if (B == 0) throw ValueError("generative_nll: empty batch");
  if (D < 2) throw ValueError("generative_nll: sequence length must be at least 2");
  if (static_cast<std::size_t>(B) * D != targets.numel())
    throw ShapeError("generative_nll: targets " + shape_str(targets.shape) + " do not match logits " +
                     shape_str(logits.shape()));

  // position t picks the log-probability of token t+1; the last slot is a
  // dummy masked to zero.
  IntArray next_ids = IntArray::zeros({B, D});
  std::vector<S> mask_v(static_cast<std::size_t>(D), S(1));
  mask_v.back() = S(0);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t + 1 < D; ++t)
      next_ids.data[static_cast<std::size_t>(b) * D + t] =
          targets.data[static_cast<std::size_t>(b) * D + t + 1];

  auto lp = log_softmax(logits, 2);
  auto picked = gather_last(lp, next_ids);                       // B x D
  auto mask = TensorT<S>::from_vector({1, D}, std::move(mask_v)); // constant
  auto per_image = sum_axis(mul(picked, mask), 1);               // B
  return scale(mean_all(per_image), S(-1));
}

// Symmetric normalized-temperature cross-entropy over index-aligned view
// pairs. For anchor i of view 1 the denominator sums similarities to every
// other view-1 row and to all view-2 rows (positive included); the symmetric
// term swaps views; the 2N terms are averaged with a -1/(2N) prefactor.
template <typename S>
TensorT<S> nt_xent(const TensorT<S>& z1, const TensorT<S>& z2, S temperature) {
  if (temperature <= S(0)) throw ValueError("nt_xent: temperature must be positive");
  if (z1.rank() != 2 || z2.rank() != 2 || z1.shape() != z2.shape())
    throw ShapeError("nt_xent: views must share an N x p shape, got " + shape_str(z1.shape()) +
                     " and " + shape_str(z2.shape()));
  int N = z1.dim(0), p = z1.dim(1);
  if (N == 0) throw ValueError("nt_xent: empty batch");
  for (const auto* z : {&z1, &z2})
    for (int i = 0; i < N; ++i) {
      double ss = 0;
      for (int j = 0; j < p; ++j) {
        double v = z->data()[static_cast<std::size_t>(i) * p + j];
        ss += v * v;
      }
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-4)
        throw ValueError("nt_xent: row " + std::to_string(i) + " is not unit-norm");
    }

  S inv_t = S(1) / temperature;
  IntArray diag = IntArray::zeros({N, N});
  for (int i = 0; i < N; ++i) diag.data[static_cast<std::size_t>(i) * N + i] = 1;
  IntArray positive = IntArray::zeros({N});
  for (int i = 0; i < N; ++i) positive.data[static_cast<std::size_t>(i)] = N + i;
  const S neg_inf = -std::numeric_limits<S>::infinity();

  auto side = [&](const TensorT<S>& a, const TensorT<S>& b) {
    auto same = masked_fill(scale(matmul(a, transpose_last(a)), inv_t), diag, neg_inf);
    auto cross = scale(matmul(a, transpose_last(b)), inv_t);
    auto lp = log_softmax(concat<S>({same, cross}, 1), 1); // N x 2N
    return sum_all(gather_last(lp, positive));
  };
  auto total = add(side(z1, z2), side(z2, z1));
  return scale(total, S(-1) / static_cast<S>(2 * N));
}

template <typename S>
TensorT<S> hybrid_loss(const TensorT<S>& gen, const TensorT<S>& con, const LossWeights& w) {
  return add(scale(gen, static_cast<S>(w.alpha)), scale(con, static_cast<S>(w.beta)));
}

// Bits per predicted token from a nats-per-image NLL.
inline double bpd_from_nll(double nll_nats_per_image, int seq_len) {
  if (seq_len < 2) throw ValueError("bpd_from_nll: sequence length must be at least 2");
  return nll_nats_per_image / (static_cast<double>(seq_len - 1) * std::log(2.0));
}

} // namespace gcrl
