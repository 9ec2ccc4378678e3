#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gcrl/eval.hpp"
#include "gcrl/losses.hpp"
#include "gcrl/model.hpp"

namespace gcrl {

// Per-class Gaussian fit of labeled representations. The stored factor is the
// lower Cholesky triangle of (sample covariance + eps * I); eps is
// 1e-4 * mean(diag(cov)) with a small absolute floor so degenerate classes
// stay positive definite.
struct ClassGaussian {
  std::vector<double> mean;     // d
  std::vector<double> chol;     // d x d lower triangle of the regularized covariance
  double log_det = 0.0;         // of the regularized covariance
  double eps = 0.0;
};

struct ClassGaussians {
  int d = 0;
  std::vector<ClassGaussian> classes;
};

// Score convention: higher = more in-distribution, for both scores.
struct OodScores {
  std::vector<double> in_scores;
  std::vector<double> out_scores;
};

ClassGaussians fit_class_gaussians(const RepMatrix& train);

// max over classes of the Gaussian log-density of the representation
// (log is monotone, so every ranking metric matches the density form).
double score_supervised(std::span<const float> rep, const ClassGaussians& g);

// Negative Euclidean norm of the gradient of the total autoregressive
// log-likelihood with respect to the post-lookup token embeddings (before
// positional terms), in eval mode.
template <typename S>
double score_unsupervised(const GcrlModelT<S>& model, const TokenGrid& grid) {
  IntArray tokens = IntArray::zeros({1, grid.height, grid.width});
  std::copy(grid.tokens.begin(), grid.tokens.end(), tokens.data.begin());
  auto emb = model.embed_tokens(tokens);
  emb.set_requires_grad(true);
  ForwardCtx ctx; // eval mode
  auto logits = model.decoder_logits_from_embedding(emb, ctx);
  IntArray flat(Shape{1, grid.seq_len()}, std::vector<std::int32_t>(tokens.data));
  // batch of one: the NLL is the negated log-likelihood, and the gradient
  // norm is sign-invariant
  auto nll = generative_nll(logits, flat);
  backward(nll);
  double sq = 0.0;
  for (S g : emb.grad()) {
    if (!std::isfinite(static_cast<double>(g)))
      throw ValueError("score_unsupervised: non-finite embedding gradient");
    sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return -std::sqrt(sq);
}

// Rank statistic with average ranks for ties:
// P(in > out) + 0.5 P(in == out).
double auroc(const OodScores& scores);

// Average precision with in-distribution as the positive class, step
// integration over descending score thresholds (ties grouped).
double auprc(const OodScores& scores);

} // namespace gcrl
