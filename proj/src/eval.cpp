#include "gcrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gcrl/errors.hpp"
#include "gcrl/losses.hpp"
#include "gcrl/optim.hpp"

namespace gcrl {

RepPosition rep_position_from_string(const std::string& s) {
  if (s == "half") return RepPosition::half;
  if (s == "last") return RepPosition::last;
  throw ValueError("rep position must be 'half' or 'last', got '" + s + "'");
}

RepMatrix extract_reps(const GcrlModel& model, const std::vector<TokenGrid>& grids,
                       const std::vector<std::int32_t>& labels, RepPosition position,
                       int batch_size) {
  if (grids.empty()) throw ValueError("extract_reps: no inputs");
  if (!labels.empty() && labels.size() != grids.size())
    throw ShapeError("extract_reps: label count does not match inputs");
  const ModelConfig& cfg = model.cfg;
  int total = cfg.total_blocks();
  int run = position == RepPosition::half ? (total + 1) / 2 : total;

  RepMatrix reps;
  reps.n = static_cast<int>(grids.size());
  reps.d = cfg.d_model;
  reps.labels = labels;
  reps.source = position == RepPosition::half ? "half" : "last";
  reps.values.resize(static_cast<std::size_t>(reps.n) * reps.d);

  ForwardCtx ctx; // eval mode
  for (std::size_t start = 0; start < grids.size(); start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(grids.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<TokenGrid> chunk(grids.begin() + static_cast<std::ptrdiff_t>(start),
                                 grids.begin() + static_cast<std::ptrdiff_t>(end));
    auto tokens = pack_token_grids(chunk);
    auto h = model.add_positions(model.embed_tokens(tokens));
    int done = 0;
    for (const auto& blk : model.enc_blocks) {
      if (done == run) break;
      h = model.block_forward(h, blk, ctx, "enc." + std::to_string(done));
      ++done;
    }
    for (const auto& blk : model.dec_blocks) {
      if (done == run) break;
      h = model.block_forward(h, blk, ctx, "dec." + std::to_string(done));
      ++done;
    }
    bool use_dec_ln = position == RepPosition::last && cfg.n_dec_blocks > 0;
    auto pooled = use_dec_ln ? model.pool_with_ln(h, model.dec_final_ln_g, model.dec_final_ln_b)
                             : model.pool_representation(h);
    std::copy(pooled.data().begin(), pooled.data().end(),
              reps.values.begin() + static_cast<std::ptrdiff_t>(start) * reps.d);
  }
  return reps;
}

RepMatrix reps_of_dataset(const GcrlModel& model, const Codebook& codebook, const Dataset& dataset,
                          RepPosition position, int batch_size) {
  std::vector<TokenGrid> grids;
  grids.reserve(dataset.size());
  for (const auto& img : dataset.images) grids.push_back(encode(img, codebook));
  return extract_reps(model, grids, dataset.labels, position, batch_size);
}

namespace {

int class_count(const RepMatrix& train, const RepMatrix& test) {
  if (train.labels.empty() || test.labels.empty())
    throw ValueError("linear_probe: both representation sets need labels");
  int c = 0;
  for (auto l : train.labels) c = std::max<int>(c, l + 1);
  for (auto l : test.labels) c = std::max<int>(c, l + 1);
  std::vector<bool> present(static_cast<std::size_t>(c), false);
  for (auto l : train.labels) present[static_cast<std::size_t>(l)] = true;
  for (int i = 0; i < c; ++i)
    if (!present[static_cast<std::size_t>(i)])
      throw ValueError("linear_probe: class " + std::to_string(i) + " absent from training labels");
  return c;
}

} // namespace

ProbeResult linear_probe(const RepMatrix& train, const RepMatrix& test, const ProbeOptions& opt) {
  if (train.n == 0 || test.n == 0) throw ValueError("linear_probe: empty representation set");
  if (train.d != test.d) throw ShapeError("linear_probe: train/test dims disagree");
  int C = class_count(train, test);
  int d = train.d;

  auto weight = Tensor::zeros({d, C}, true);
  auto bias = Tensor::zeros({C}, true);
  OptimState optim;
  optim.init({weight.numel(), bias.numel()}, {true, false});
  AdamWHyper hyper;
  hyper.weight_decay = opt.weight_decay;

  std::vector<std::size_t> order(static_cast<std::size_t>(train.n));
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(opt.seed, StreamPurpose::probe, static_cast<std::uint64_t>(epoch), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(static_cast<std::uint32_t>(i))]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch));
      int B = static_cast<int>(end - start);
      std::vector<float> xb(static_cast<std::size_t>(B) * d);
      IntArray yb = IntArray::zeros({B});
      for (int i = 0; i < B; ++i) {
        std::size_t src = order[start + static_cast<std::size_t>(i)];
        std::copy_n(train.row(static_cast<int>(src)), d, xb.begin() + static_cast<std::ptrdiff_t>(i) * d);
        yb.data[static_cast<std::size_t>(i)] = train.labels[src];
      }
      auto x = Tensor::from_vector({B, d}, std::move(xb));
      auto logits = add(matmul(x, weight), bias);
      auto loss = scale(sum_all(gather_last(log_softmax(logits, 1), yb)), -1.0f / static_cast<float>(B));
      backward(loss);
      std::vector<ParamRef> refs{
          {"probe.weight", std::span<float>(weight.data()), std::span<const float>(weight.grad()), 0},
          {"probe.bias", std::span<float>(bias.data()), std::span<const float>(bias.grad()), 1}};
      adamw_step(std::span<ParamRef>(refs), optim, hyper, opt.lr);
    }
  }

  ProbeResult res;
  res.weight = weight.data();
  res.bias = bias.data();
  res.confidences.resize(static_cast<std::size_t>(test.n));
  res.correct.resize(static_cast<std::size_t>(test.n));
  std::size_t hits = 0;
  for (int i = 0; i < test.n; ++i) {
    // double-precision softmax over C logits
    std::vector<double> logits(static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
      double acc = res.bias[static_cast<std::size_t>(c)];
      for (int j = 0; j < d; ++j)
        acc += static_cast<double>(test.row(i)[j]) * res.weight[static_cast<std::size_t>(j) * C + c];
      logits[static_cast<std::size_t>(c)] = acc;
    }
    int arg = 0;
    for (int c = 1; c < C; ++c)
      if (logits[static_cast<std::size_t>(c)] > logits[static_cast<std::size_t>(arg)]) arg = c;
    double mx = logits[static_cast<std::size_t>(arg)];
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - mx);
    res.confidences[static_cast<std::size_t>(i)] = static_cast<float>(1.0 / denom);
    bool ok = arg == test.labels[static_cast<std::size_t>(i)];
    res.correct[static_cast<std::size_t>(i)] = ok ? 1 : 0;
    hits += ok ? 1 : 0;
  }
  res.accuracy = static_cast<double>(hits) / static_cast<double>(test.n);
  return res;
}

double knn_probe(const RepMatrix& train, const RepMatrix& test, int k) {
  if (k <= 0) throw ValueError("knn_probe: k must be positive");
  if (k > train.n) throw ValueError("knn_probe: k exceeds the training set size");
  if (train.labels.empty() || test.labels.empty()) throw ValueError("knn_probe: labels required");
  if (train.d != test.d) throw ShapeError("knn_probe: dims disagree");
  int d = train.d;
  int C = 0;
  for (auto l : train.labels) C = std::max<int>(C, l + 1);

  auto row_norm = [&](const float* v) {
    double s = 0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(v[j]) * v[j];
    return std::sqrt(s);
  };
  std::vector<double> train_norm(static_cast<std::size_t>(train.n));
  for (int i = 0; i < train.n; ++i) train_norm[static_cast<std::size_t>(i)] = row_norm(train.row(i));

  std::size_t errors = 0;
  std::vector<std::pair<double, int>> sims(static_cast<std::size_t>(train.n));
  for (int i = 0; i < test.n; ++i) {
    double tn = row_norm(test.row(i));
    for (int j = 0; j < train.n; ++j) {
      double dot = 0;
      for (int q = 0; q < d; ++q)
        dot += static_cast<double>(test.row(i)[q]) * train.row(j)[q];
      double denom = tn * train_norm[static_cast<std::size_t>(j)];
      sims[static_cast<std::size_t>(j)] = {denom > 0 ? dot / denom : 0.0, j};
    }
    // neighbours by descending similarity; equal similarities by lower index
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<int> votes(static_cast<std::size_t>(C), 0);
    std::vector<double> weight(static_cast<std::size_t>(C), 0.0);
    for (int q = 0; q < k; ++q) {
      int lbl = train.labels[static_cast<std::size_t>(sims[static_cast<std::size_t>(q)].second)];
      votes[static_cast<std::size_t>(lbl)] += 1;
      weight[static_cast<std::size_t>(lbl)] += sims[static_cast<std::size_t>(q)].first;
    }
    int best = 0;
    for (int c = 1; c < C; ++c) {
      if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)] ||
          (votes[static_cast<std::size_t>(c)] == votes[static_cast<std::size_t>(best)] &&
           weight[static_cast<std::size_t>(c)] > weight[static_cast<std::size_t>(best)]))
        best = c;
    }
    if (best != test.labels[static_cast<std::size_t>(i)]) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(test.n);
}

EceResult ece(const std::vector<float>& confidences, const std::vector<std::uint8_t>& correct,
              int n_bins) {
  if (confidences.empty()) throw ValueError("ece: no samples");
  if (confidences.size() != correct.size()) throw ShapeError("ece: confidence/flag size mismatch");
  if (n_bins < 1) throw ValueError("ece: need at least one bin");
  EceResult res;
  res.bins.n_bins = n_bins;
  res.bins.count.assign(static_cast<std::size_t>(n_bins), 0);
  res.bins.mean_confidence.assign(static_cast<std::size_t>(n_bins), 0.0);
  res.bins.accuracy.assign(static_cast<std::size_t>(n_bins), 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    double c = confidences[i];
    if (c < 0.0 || c > 1.0) throw ValueError("ece: confidence " + std::to_string(c) + " outside [0, 1]");
    // bins partition (0, 1]; an exact zero joins the first bin
    int b = c <= 0.0 ? 0 : static_cast<int>(std::ceil(c * n_bins)) - 1;
    b = std::clamp(b, 0, n_bins - 1);
    res.bins.count[static_cast<std::size_t>(b)] += 1;
    res.bins.mean_confidence[static_cast<std::size_t>(b)] += c;
    res.bins.accuracy[static_cast<std::size_t>(b)] += correct[i] ? 1.0 : 0.0;
  }
  double n = static_cast<double>(confidences.size());
  for (int b = 0; b < n_bins; ++b) {
    auto cnt = res.bins.count[static_cast<std::size_t>(b)];
    if (cnt == 0) continue;
    res.bins.mean_confidence[static_cast<std::size_t>(b)] /= static_cast<double>(cnt);
    res.bins.accuracy[static_cast<std::size_t>(b)] /= static_cast<double>(cnt);
    res.value += (static_cast<double>(cnt) / n) *
                 std::abs(res.bins.accuracy[static_cast<std::size_t>(b)] -
                          res.bins.mean_confidence[static_cast<std::size_t>(b)]);
  }
  return res;
}

std::vector<LowshotResult> lowshot_probe(const RepMatrix& train, const RepMatrix& test,
                                         float fraction, const std::vector<int>& seeds,
                                         const ProbeOptions& opt, int ece_bins) {
  if (fraction <= 0.0f || fraction > 1.0f) throw ValueError("lowshot_probe: fraction must be in (0, 1]");
  int C = 0;
  for (auto l : train.labels) C = std::max<int>(C, l + 1);
  if (C < 1) throw ValueError("lowshot_probe: train labels required");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < train.labels.size(); ++i)
    by_class[static_cast<std::size_t>(train.labels[i])].push_back(i);
  std::size_t per_class = static_cast<std::size_t>(
      std::floor(static_cast<double>(fraction) * train.n / static_cast<double>(C) + 1e-9));
  for (int c = 0; c < C; ++c) {
    if (per_class == 0 || by_class[static_cast<std::size_t>(c)].size() < per_class)
      throw ValueError("lowshot_probe: class " + std::to_string(c) +
                       " has no samples after subsampling");
  }

  std::vector<LowshotResult> results;
  for (int seed : seeds) {
    std::vector<std::size_t> selected;
    for (int c = 0; c < C; ++c) {
      auto pool = by_class[static_cast<std::size_t>(c)];
      RngStream rng(static_cast<std::uint64_t>(seed), StreamPurpose::lowshot,
                    static_cast<std::uint64_t>(c), 0);
      for (std::size_t i = pool.size(); i > 1; --i)
        std::swap(pool[i - 1], pool[rng.below(static_cast<std::uint32_t>(i))]);
      selected.insert(selected.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(per_class));
    }
    std::sort(selected.begin(), selected.end());
    RepMatrix sub;
    sub.n = static_cast<int>(selected.size());
    sub.d = train.d;
    sub.values.resize(selected.size() * static_cast<std::size_t>(train.d));
    sub.labels.resize(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) {
      std::copy_n(train.row(static_cast<int>(selected[i])), train.d,
                  sub.values.begin() + static_cast<std::ptrdiff_t>(i) * train.d);
      sub.labels[i] = train.labels[selected[i]];
    }
    ProbeOptions popt = opt;
    popt.seed = static_cast<std::uint64_t>(seed);
    auto probe = linear_probe(sub, test, popt);
    auto cal = ece(probe.confidences, probe.correct, ece_bins);
    results.push_back({seed, probe.accuracy, cal.value});
  }
  return results;
}

std::vector<TokenGrid> sample_tokens(const GcrlModel& model, const std::vector<float>& marginal,
                                     int n_images, double temperature, std::uint64_t seed) {
  if (temperature <= 0.0) throw ValueError("sample: temperature must be positive");
  if (model.cfg.n_dec_blocks < 1) throw ValueError("sample: model has no decoder");
  if (static_cast<int>(marginal.size()) != model.cfg.vocab)
    throw ShapeError("sample: first-token marginal has " + std::to_string(marginal.size()) +
                     " entries for vocab " + std::to_string(model.cfg.vocab));
  if (n_images < 1) throw ValueError("sample: need at least one image");
  int H = model.cfg.height, W = model.cfg.width, D = H * W, K = model.cfg.vocab;

  std::vector<RngStream> streams;
  for (int i = 0; i < n_images; ++i)
    streams.emplace_back(seed, StreamPurpose::sample, 0, static_cast<std::uint64_t>(i));

  auto draw = [](RngStream& rng, const std::vector<double>& probs) {
    double u = rng.next_double();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<std::int32_t>(i);
    }
    return static_cast<std::int32_t>(probs.size() - 1);
  };

  IntArray tokens = IntArray::zeros({n_images, H, W});
  std::vector<double> probs(static_cast<std::size_t>(K));
  for (int i = 0; i < n_images; ++i) {
    for (int v = 0; v < K; ++v) probs[static_cast<std::size_t>(v)] = marginal[static_cast<std::size_t>(v)];
    tokens.data[static_cast<std::size_t>(i) * D] = draw(streams[static_cast<std::size_t>(i)], probs);
  }

  ForwardCtx ctx; // eval mode
  for (int t = 1; t < D; ++t) {
    auto logits = model.decoder_logits(tokens, ctx); // B x D x K
    for (int i = 0; i < n_images; ++i) {
      const float* row = logits.data().data() + (static_cast<std::size_t>(i) * D + (t - 1)) * K;
      double mx = row[0];
      for (int v = 1; v < K; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double denom = 0.0;
      for (int v = 0; v < K; ++v) {
        probs[static_cast<std::size_t>(v)] = std::exp((static_cast<double>(row[v]) - mx) / temperature);
        denom += probs[static_cast<std::size_t>(v)];
      }
      for (auto& p : probs) p /= denom;
      tokens.data[static_cast<std::size_t>(i) * D + t] = draw(streams[static_cast<std::size_t>(i)], probs);
    }
  }

  std::vector<TokenGrid> out;
  for (int i = 0; i < n_images; ++i) {
    TokenGrid g(H, W);
    std::copy_n(tokens.data.begin() + static_cast<std::ptrdiff_t>(i) * D, D, g.tokens.begin());
    out.push_back(std::move(g));
  }
  return out;
}

double dataset_nll(const GcrlModel& model, const Codebook& codebook, const Dataset& dataset,
                   int batch_size) {
  if (dataset.size() == 0) throw ValueError("dataset_nll: empty dataset");
  ForwardCtx ctx;
  double total = 0.0;
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<TokenGrid> grids;
    for (std::size_t i = start; i < end; ++i) grids.push_back(encode(dataset.images[i], codebook));
    auto tokens = pack_token_grids(grids);
    auto logits = model.decoder_logits(tokens, ctx);
    IntArray flat(Shape{static_cast<int>(grids.size()), model.cfg.seq_len()},
                  std::vector<std::int32_t>(tokens.data));
    total += generative_nll(logits, flat).item() * static_cast<double>(grids.size());
  }
  return total / static_cast<double>(dataset.size());
}

} // namespace gcrl
