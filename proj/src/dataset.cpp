#include "gcrl/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "gcrl/errors.hpp"
#include "gcrl/rng.hpp"
#include "gcrl/serialize.hpp"

namespace gcrl {

namespace {

Dataset read_cifar_binary(const std::string& path) {
  auto bytes = io::read_file(path);
  constexpr std::size_t kRecord = 1 + 3072; // label byte + 32x32x3 planar pixels
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw IoError(path + ": size " + std::to_string(bytes.size()) +
                  " is not a multiple of the 3073-byte record (first bad byte at offset " +
                  std::to_string((bytes.size() / kRecord) * kRecord) + ")");
  std::size_t n = bytes.size() / kRecord;
  Dataset ds;
  ds.images.reserve(n);
  ds.labels.reserve(n);
  int max_label = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kRecord;
    ds.labels.push_back(rec[0]);
    max_label = std::max<int>(max_label, rec[0]);
    Image img(32, 32);
    // planar R then G then B, row-major within each plane
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 1024; ++i)
        img.data[static_cast<std::size_t>(i) * 3 + c] =
            static_cast<float>(rec[1 + c * 1024 + i]) / 255.0f;
    ds.images.push_back(std::move(img));
  }
  ds.n_classes = max_label + 1;
  return ds;
}

std::uint32_t read_be32(io::Reader& r) {
  std::uint8_t b[4];
  r.bytes(b, 4);
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

Dataset read_idx(const std::string& image_path, const std::string& label_path) {
  auto bytes = io::read_file(image_path);
  io::Reader r(bytes.data(), bytes.size(), image_path);
  std::uint32_t magic = read_be32(r);
  if (magic != 0x00000803u)
    throw IoError(image_path + ": bad IDX image magic at byte offset 0 (got " +
                  std::to_string(magic) + ")");
  std::uint32_t n = read_be32(r);
  std::uint32_t rows = read_be32(r);
  std::uint32_t cols = read_be32(r);
  Dataset ds;
  ds.images.reserve(n);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    r.bytes(px.data(), px.size());
    Image img(static_cast<int>(rows), static_cast<int>(cols));
    for (std::size_t p = 0; p < px.size(); ++p) {
      float v = static_cast<float>(px[p]) / 255.0f;
      img.data[p * 3] = img.data[p * 3 + 1] = img.data[p * 3 + 2] = v; // replicate gray
    }
    ds.images.push_back(std::move(img));
  }
  if (!label_path.empty()) {
    auto lbytes = io::read_file(label_path);
    io::Reader lr(lbytes.data(), lbytes.size(), label_path);
    std::uint32_t lmagic = read_be32(lr);
    if (lmagic != 0x00000801u)
      throw IoError(label_path + ": bad IDX label magic at byte offset 0 (got " +
                    std::to_string(lmagic) + ")");
    std::uint32_t ln = read_be32(lr);
    if (ln != n)
      throw IoError(label_path + ": label count " + std::to_string(ln) + " does not match " +
                    std::to_string(n) + " images");
    int max_label = 0;
    ds.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      std::uint8_t b;
      lr.bytes(&b, 1);
      ds.labels[i] = b;
      max_label = std::max<int>(max_label, b);
    }
    ds.n_classes = max_label + 1;
  }
  return ds;
}

Dataset read_raw_dump(const std::string& path) {
  auto dump = load_image_dump(path);
  Dataset ds;
  ds.images = std::move(dump.images);
  if (dump.labels) {
    ds.labels = std::move(*dump.labels);
    int max_label = 0;
    for (std::int32_t l : ds.labels) max_label = std::max<int>(max_label, l);
    ds.n_classes = max_label + 1;
  }
  return ds;
}

} // namespace

Image synthetic_image(const SyntheticParams& p, int cls, std::uint64_t index) {
  RngStream rng(p.seed, StreamPurpose::synth, static_cast<std::uint64_t>(cls),
                p.split_offset + index);
  int S = p.image_size;
  Image img(S, S);

  // nuisance colors, identically distributed for every class; redraw until
  // the pair has enough contrast to survive quantization
  float bg[3], fg[3];
  for (int c = 0; c < 3; ++c) bg[c] = static_cast<float>(rng.uniform(0.05, 0.95));
  for (int attempt = 0; attempt < 16; ++attempt) {
    float dist = 0.0f;
    for (int c = 0; c < 3; ++c) {
      fg[c] = static_cast<float>(rng.uniform(0.05, 0.95));
      dist += (fg[c] - bg[c]) * (fg[c] - bg[c]);
    }
    if (dist > 0.4f) break;
  }

  // Both families are fine-scale global textures, so the class signal
  // survives aggressive crops while color stays pure nuisance.
  int family = cls % 2;
  std::vector<float> field(static_cast<std::size_t>(S) * S, 0.0f);
  if (family == 0) {
    // oriented stripes with 2.5-4 periods across the frame
    double angle = rng.uniform(0.0, M_PI);
    double freq = rng.uniform(2.5, 4.0) + (cls / 2);
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double cx = std::cos(angle), sy = std::sin(angle);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double u = (x * cx + y * sy) / S;
        field[static_cast<std::size_t>(y) * S + x] =
            static_cast<float>(0.5 * (1.0 + std::sin(2.0 * M_PI * freq * u + phase)));
      }
  } else {
    // scattered small blobs; every crop window contains several
    int blobs = S + (cls / 2) * 4 + static_cast<int>(rng.below(4));
    for (int b = 0; b < blobs; ++b) {
      double by = rng.uniform(0.0, 1.0) * S;
      double bx = rng.uniform(0.0, 1.0) * S;
      double radius = rng.uniform(0.06, 0.11) * S;
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
          float v = static_cast<float>(std::exp(-d2 / (2.0 * radius * radius)));
          auto& cell = field[static_cast<std::size_t>(y) * S + x];
          cell = std::max(cell, v);
        }
    }
  }

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      float v = field[static_cast<std::size_t>(y) * S + x];
      for (int c = 0; c < 3; ++c) {
        float noise = static_cast<float>(rng.normal()) * p.noise;
        img.at(y, x, c) = std::clamp(bg[c] + v * (fg[c] - bg[c]) + noise, 0.0f, 1.0f);
      }
    }
  return img;
}

Dataset generate_synthetic(const SyntheticParams& p) {
  if (p.n_per_class < 1 || p.n_classes < 1 || p.image_size < 1)
    throw ValueError("generate_synthetic: counts and size must be positive");
  Dataset ds;
  ds.n_classes = p.n_classes;
  for (int cls = 0; cls < p.n_classes; ++cls)
    for (int i = 0; i < p.n_per_class; ++i) {
      ds.images.push_back(synthetic_image(p, cls, static_cast<std::uint64_t>(i)));
      ds.labels.push_back(cls);
    }
  return ds;
}

Dataset read_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetKind::cifar_binary: return read_cifar_binary(spec.path);
    case DatasetKind::idx_ubyte: return read_idx(spec.path, spec.labels_path);
    case DatasetKind::synthetic: return generate_synthetic(spec.synth);
    case DatasetKind::raw_dump: return read_raw_dump(spec.path);
  }
  throw ValueError("read_dataset: unknown dataset kind");
}

} // namespace gcrl
