#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gcrl/dataset.hpp"
#include "gcrl/model.hpp"
#include "gcrl/quantizer.hpp"

namespace gcrl {

struct RepMatrix {
  int n = 0;
  int d = 0;
  std::vector<float> values; // n x d
  std::vector<std::int32_t> labels; // empty when unlabeled
  std::string source;

  const float* row(int i) const { return values.data() + static_cast<std::size_t>(i) * d; }
};

enum class RepPosition { half, last };

RepPosition rep_position_from_string(const std::string& s);

// Pooled representations of raw (unaugmented) token grids. `half` pools after
// block ceil(n/2) of the combined stack — for an even encoder/decoder split
// that is exactly the encoder output the contrastive path trains — using the
// encoder-side LN parameters; `last` pools after the final block using the
// decoder-side LN when one exists. Results are per-sample, so batching does
// not affect values.
RepMatrix extract_reps(const GcrlModel& model, const std::vector<TokenGrid>& grids,
                       const std::vector<std::int32_t>& labels, RepPosition position,
                       int batch_size = 32);

RepMatrix reps_of_dataset(const GcrlModel& model, const Codebook& codebook, const Dataset& dataset,
                          RepPosition position, int batch_size = 32);

struct ProbeOptions {
  int epochs = 100;
  float lr = 0.01f;
  float weight_decay = 1e-4f;
  int batch = 512;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<float> weight; // d x C
  std::vector<float> bias;   // C
  std::vector<float> confidences;      // per test sample, max softmax probability
  std::vector<std::uint8_t> correct;   // per test sample
};

// Single linear layer on frozen representations, softmax cross-entropy,
// AdamW at a constant learning rate.
ProbeResult linear_probe(const RepMatrix& train, const RepMatrix& test, const ProbeOptions& opt);

// Cosine-similarity k-nearest-neighbour majority vote; vote ties break by
// summed similarity, then by lower class id. Returns the error rate.
double knn_probe(const RepMatrix& train, const RepMatrix& test, int k = 5);

struct ReliabilityBins {
  int n_bins = 0;
  std::vector<std::size_t> count;
  std::vector<double> mean_confidence;
  std::vector<double> accuracy;
};

struct EceResult {
  double value = 0.0;
  ReliabilityBins bins;
};

// Equal-width bins on (0, 1]; ECE = sum_b (count_b / n) * |acc_b - conf_b|.
EceResult ece(const std::vector<float>& confidences, const std::vector<std::uint8_t>& correct,
              int n_bins = 10);

struct LowshotResult {
  int seed = 0;
  double accuracy = 0.0;
  double ece = 0.0;
};

// Stratified subsample (equal per-class counts, remainder dropped) followed
// by a linear probe; one result per seed. Selected indices are re-sorted so a
// fraction of 1.0 on a balanced set reproduces the full probe exactly.
std::vector<LowshotResult> lowshot_probe(const RepMatrix& train, const RepMatrix& test,
                                         float fraction, const std::vector<int>& seeds,
                                         const ProbeOptions& opt, int ece_bins = 10);

// Ancestral raster-order sampling. The first token draws from the stored
// empirical marginal; later tokens draw from softmax(logits / temperature).
std::vector<TokenGrid> sample_tokens(const GcrlModel& model, const std::vector<float>& marginal,
                                     int n_images, double temperature, std::uint64_t seed);

// Mean autoregressive NLL (nats per image) of raw encodes of a dataset.
double dataset_nll(const GcrlModel& model, const Codebook& codebook, const Dataset& dataset,
                   int batch_size = 32);

} // namespace gcrl
