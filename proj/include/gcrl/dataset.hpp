#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gcrl/image.hpp"

namespace gcrl {

enum class DatasetKind { cifar_binary, idx_ubyte, synthetic, raw_dump };

// Procedurally generated stand-in dataset: classes alternate between striped
// and blobbed texture families rendered over random nuisance colors, so class
// identity lives in shape while color carries no label information.
// Generation is a pure function of (params, class, split_offset + index).
struct SyntheticParams {
  int n_per_class = 32;
  int n_classes = 2;
  int image_size = 16;
  float noise = 0.05f;
  std::uint64_t seed = 0;
  std::uint64_t split_offset = 0; // index base; disjoint offsets give disjoint splits
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::string path;        // cifar_binary record file, idx image file, or GIMG dump
  std::string labels_path; // idx label file (optional)
  SyntheticParams synth;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<std::int32_t> labels; // empty when unlabeled
  int n_classes = 0;

  std::size_t size() const { return images.size(); }
  bool labeled() const { return !labels.empty(); }
};

Dataset read_dataset(const DatasetSpec& spec);

Image synthetic_image(const SyntheticParams& params, int cls, std::uint64_t index);
Dataset generate_synthetic(const SyntheticParams& params);

} // namespace gcrl
