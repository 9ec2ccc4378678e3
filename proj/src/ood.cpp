#include "gcrl/ood.hpp"

#include <algorithm>
#include <cmath>

#include "gcrl/errors.hpp"

namespace gcrl {

namespace {

constexpr double kEpsFloor = 1e-8;

// In-place lower Cholesky of a dense SPD matrix.
void cholesky(std::vector<double>& a, int d) {
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<std::size_t>(i) * d + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<std::size_t>(i) * d + k] * a[static_cast<std::size_t>(j) * d + k];
      if (i == j) {
        if (s <= 0.0) throw ValueError("fit_class_gaussians: covariance is not positive definite");
        a[static_cast<std::size_t>(i) * d + j] = std::sqrt(s);
      } else {
        a[static_cast<std::size_t>(i) * d + j] = s / a[static_cast<std::size_t>(j) * d + j];
      }
    }
    for (int j = i + 1; j < d; ++j) a[static_cast<std::size_t>(i) * d + j] = 0.0;
  }
}

} // namespace

ClassGaussians fit_class_gaussians(const RepMatrix& train) {
  if (train.labels.empty()) throw ValueError("fit_class_gaussians: labels required");
  int C = 0;
  for (auto l : train.labels) C = std::max<int>(C, l + 1);
  int d = train.d;
  ClassGaussians g;
  g.d = d;
  g.classes.resize(static_cast<std::size_t>(C));

  for (int c = 0; c < C; ++c) {
    std::vector<int> members;
    for (int i = 0; i < train.n; ++i)
      if (train.labels[static_cast<std::size_t>(i)] == c) members.push_back(i);
    if (members.size() < 2)
      throw ValueError("fit_class_gaussians: class " + std::to_string(c) + " has " +
                       std::to_string(members.size()) + " samples, need at least 2");
    auto& cls = g.classes[static_cast<std::size_t>(c)];
    cls.mean.assign(static_cast<std::size_t>(d), 0.0);
    for (int i : members)
      for (int j = 0; j < d; ++j) cls.mean[static_cast<std::size_t>(j)] += train.row(i)[j];
    for (auto& m : cls.mean) m /= static_cast<double>(members.size());

    std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
    for (int i : members)
      for (int a = 0; a < d; ++a) {
        double da = train.row(i)[a] - cls.mean[static_cast<std::size_t>(a)];
        for (int b = 0; b <= a; ++b) {
          double db = train.row(i)[b] - cls.mean[static_cast<std::size_t>(b)];
          cov[static_cast<std::size_t>(a) * d + b] += da * db;
        }
      }
    double denom = static_cast<double>(members.size() - 1);
    double trace = 0.0;
    for (int a = 0; a < d; ++a) {
      for (int b = 0; b <= a; ++b) {
        cov[static_cast<std::size_t>(a) * d + b] /= denom;
        cov[static_cast<std::size_t>(b) * d + a] = cov[static_cast<std::size_t>(a) * d + b];
      }
      trace += cov[static_cast<std::size_t>(a) * d + a];
    }
    cls.eps = std::max(1e-4 * trace / static_cast<double>(d), kEpsFloor);
    for (int a = 0; a < d; ++a) cov[static_cast<std::size_t>(a) * d + a] += cls.eps;

    cholesky(cov, d);
    cls.chol = std::move(cov);
    cls.log_det = 0.0;
    for (int a = 0; a < d; ++a)
      cls.log_det += 2.0 * std::log(cls.chol[static_cast<std::size_t>(a) * d + a]);
  }
  return g;
}

double score_supervised(std::span<const float> rep, const ClassGaussians& g) {
  int d = g.d;
  if (static_cast<int>(rep.size()) != d)
    throw ShapeError("score_supervised: representation has " + std::to_string(rep.size()) +
                     " dims, fit has " + std::to_string(d));
  const double log2pi = std::log(2.0 * M_PI);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> y(static_cast<std::size_t>(d));
  for (const auto& cls : g.classes) {
    // forward substitution: L y = (x - mu); the quadratic form is |y|^2
    for (int i = 0; i < d; ++i) {
      double s = static_cast<double>(rep[static_cast<std::size_t>(i)]) - cls.mean[static_cast<std::size_t>(i)];
      for (int k = 0; k < i; ++k) s -= cls.chol[static_cast<std::size_t>(i) * d + k] * y[static_cast<std::size_t>(k)];
      y[static_cast<std::size_t>(i)] = s / cls.chol[static_cast<std::size_t>(i) * d + i];
    }
    double quad = 0.0;
    for (double v : y) quad += v * v;
    double log_density = -0.5 * (d * log2pi + cls.log_det + quad);
    best = std::max(best, log_density);
  }
  return best;
}

double auroc(const OodScores& scores) {
  std::size_t n_in = scores.in_scores.size(), n_out = scores.out_scores.size();
  if (n_in == 0 || n_out == 0) throw ValueError("auroc: both sides need at least one score");
  struct Item {
    double score;
    bool is_in;
  };
  std::vector<Item> all;
  all.reserve(n_in + n_out);
  for (double s : scores.in_scores) all.push_back({s, true});
  for (double s : scores.out_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // average ranks over tie groups
  double rank_sum_in = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j)); // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (all[k].is_in) rank_sum_in += avg_rank;
    i = j;
  }
  double u = rank_sum_in - static_cast<double>(n_in) * (static_cast<double>(n_in) + 1.0) / 2.0;
  return u / (static_cast<double>(n_in) * static_cast<double>(n_out));
}

double auprc(const OodScores& scores) {
  std::size_t n_in = scores.in_scores.size(), n_out = scores.out_scores.size();
  if (n_in == 0 || n_out == 0) throw ValueError("auprc: both sides need at least one score");
  struct Item {
    double score;
    bool is_in;
  };
  std::vector<Item> all;
  all.reserve(n_in + n_out);
  for (double s : scores.in_scores) all.push_back({s, true});
  for (double s : scores.out_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].is_in)
        ++tp;
      else
        ++fp;
    }
    double recall = static_cast<double>(tp) / static_cast<double>(n_in);
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

} // namespace gcrl
