#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>

#include "gcrl/quantizer.hpp"
#include "gcrl/rng.hpp"
#include "gcrl/serialize.hpp"

using namespace gcrl;

namespace {

// exhaustive nearest-centroid scan; the independent oracle for encode()
int scan_nearest(const float* rgb, const Codebook& cb) {
  int best = -1;
  double best_d = 1e300;
  for (int c = 0; c < cb.k; ++c) {
    double d = 0;
    for (int j = 0; j < 3; ++j) {
      double diff = static_cast<double>(rgb[j]) - cb.color(c)[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<float> cluster_pixels(const std::vector<std::array<float, 3>>& centers, int per_cluster,
                                  float spread, RngStream& rng) {
  std::vector<float> px;
  for (const auto& c : centers)
    for (int i = 0; i < per_cluster; ++i)
      for (int j = 0; j < 3; ++j)
        px.push_back(std::clamp(c[j] + static_cast<float>(rng.uniform(-spread, spread)), 0.0f, 1.0f));
  return px;
}

} // namespace

TEST_CASE("all-equal pixels with K=1 recover that pixel") {
  std::vector<float> px;
  for (int i = 0; i < 10; ++i) {
    px.push_back(0.25f);
    px.push_back(0.5f);
    px.push_back(0.75f);
  }
  auto cb = build_codebook(px, 1, 10, 0);
  CHECK(cb.centroids[0] == doctest::Approx(0.25f));
  CHECK(cb.centroids[1] == doctest::Approx(0.5f));
  CHECK(cb.centroids[2] == doctest::Approx(0.75f));
}

TEST_CASE("four well-separated clusters recover the exact cluster means") {
  RngStream rng(5, StreamPurpose::misc, 0, 0);
  std::vector<std::array<float, 3>> centers{
      {0.1f, 0.1f, 0.1f}, {0.9f, 0.1f, 0.2f}, {0.1f, 0.9f, 0.8f}, {0.8f, 0.8f, 0.1f}};
  auto px = cluster_pixels(centers, 50, 0.02f, rng);
  auto cb = build_codebook(px, 4, 50, 7);

  // oracle: with well-separated tight clusters the optimum assigns each
  // cluster to one centroid, so centroids must equal per-cluster means
  for (int cl = 0; cl < 4; ++cl) {
    double mean[3] = {0, 0, 0};
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 3; ++j) mean[j] += px[(static_cast<std::size_t>(cl) * 50 + i) * 3 + j];
    for (double& m : mean) m /= 50.0;
    // find the matching centroid
    float probe[3] = {static_cast<float>(mean[0]), static_cast<float>(mean[1]),
                      static_cast<float>(mean[2])};
    int code = nearest_code(probe, cb);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(cb.color(code)[j] - mean[j]) < 1e-6);
  }
}

TEST_CASE("mean squared quantization error is non-increasing across iterations") {
  RngStream rng(9, StreamPurpose::misc, 0, 0);
  std::vector<float> px;
  for (int i = 0; i < 600; ++i) px.push_back(static_cast<float>(rng.next_double()));
  std::vector<double> trace;
  build_codebook(px, 7, 30, 3, &trace);
  REQUIRE(trace.size() >= 2);
  for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-12);
}

TEST_CASE("a 512-code book turns a 32x32 RGB image into 1024 tokens") {
  RngStream rng(2, StreamPurpose::misc, 0, 0);
  std::vector<float> px;
  for (int i = 0; i < 3 * 2000; ++i) px.push_back(static_cast<float>(rng.next_double()));
  auto cb = build_codebook(px, 512, 2, 1);
  Image img(32, 32);
  for (auto& v : img.data) v = static_cast<float>(rng.next_double());
  auto grid = encode(img, cb);
  CHECK(grid.tokens.size() == 1024); // 3072 raw channel values -> 1024 tokens
  CHECK(grid.seq_len() == 1024);
}

TEST_CASE("images painted in centroid colors survive encode/decode exactly") {
  Codebook cb;
  cb.k = 3;
  cb.centroids = {0.0f, 0.0f, 0.0f, 0.5f, 0.25f, 0.75f, 1.0f, 1.0f, 0.0f};
  Image img(2, 2);
  int paint[4] = {2, 0, 1, 2};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) img.data[static_cast<std::size_t>(i) * 3 + j] = cb.color(paint[i])[j];
  auto grid = encode(img, cb);
  for (int i = 0; i < 4; ++i) CHECK(grid.tokens[static_cast<std::size_t>(i)] == paint[i]);
  auto back = decode(grid, cb);
  CHECK(back.data == img.data);
}

TEST_CASE("equidistant pixels take the lowest code index") {
  Codebook cb;
  cb.k = 8;
  cb.centroids.assign(24, 0.0f);
  // codes 3 and 7 equidistant from the probe; others far away
  for (int c = 0; c < 8; ++c) {
    cb.centroids[static_cast<std::size_t>(c) * 3] = (c == 3) ? 0.4f : (c == 7) ? 0.6f : 0.95f;
    cb.centroids[static_cast<std::size_t>(c) * 3 + 1] = (c == 3 || c == 7) ? 0.5f : 0.9f;
  }
  float probe[3] = {0.5f, 0.5f, 0.0f};
  CHECK(nearest_code(probe, cb) == 3);
}

TEST_CASE("encode matches the exhaustive scan oracle on a random image") {
  RngStream rng(31, StreamPurpose::misc, 0, 0);
  std::vector<float> px;
  for (int i = 0; i < 3 * 500; ++i) px.push_back(static_cast<float>(rng.next_double()));
  auto cb = build_codebook(px, 16, 20, 4);
  Image img(8, 8);
  for (auto& v : img.data) v = static_cast<float>(rng.next_double());
  auto grid = encode(img, cb);
  for (std::size_t i = 0; i < grid.tokens.size(); ++i)
    CHECK(grid.tokens[i] == scan_nearest(&img.data[i * 3], cb));
}

TEST_CASE("encode is idempotent through decode for random token grids") {
  RngStream rng(32, StreamPurpose::misc, 0, 0);
  std::vector<float> px;
  for (int i = 0; i < 3 * 400; ++i) px.push_back(static_cast<float>(rng.next_double()));
  auto cb = build_codebook(px, 12, 20, 5);
  TokenGrid grid(6, 6);
  for (auto& t : grid.tokens) t = static_cast<std::int32_t>(rng.below(12));
  auto round = encode(decode(grid, cb), cb);
  CHECK(round.tokens == grid.tokens);
}

TEST_CASE("decode paints all-zero tokens as centroid zero and rejects bad tokens") {
  Codebook cb;
  cb.k = 2;
  cb.centroids = {0.3f, 0.6f, 0.9f, 0.0f, 0.0f, 0.0f};
  TokenGrid grid(2, 3);
  auto img = decode(grid, cb);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    CHECK(img.data[i * 3] == 0.3f);
    CHECK(img.data[i * 3 + 1] == 0.6f);
    CHECK(img.data[i * 3 + 2] == 0.9f);
  }
  grid.tokens[0] = 2;
  CHECK_THROWS_AS(decode(grid, cb), ValueError);
}

TEST_CASE("build/encode input validation") {
  std::vector<float> px(9, 0.5f);
  CHECK_THROWS_AS(build_codebook(px, 4, 5, 0), ValueError); // N < K
  CHECK_THROWS_AS(build_codebook(px, 0, 5, 0), ValueError);
  Codebook cb;
  cb.k = 1;
  cb.centroids = {0.5f, 0.5f, 0.5f};
  Image img(1, 1);
  img.data = {1.5f, 0.0f, 0.0f};
  CHECK_THROWS_AS(encode(img, cb), ValueError);
}

TEST_CASE("codebook files round-trip byte-identically") {
  RngStream rng(33, StreamPurpose::misc, 0, 0);
  std::vector<float> px;
  for (int i = 0; i < 3 * 100; ++i) px.push_back(static_cast<float>(rng.next_double()));
  auto cb = build_codebook(px, 8, 10, 6);
  std::string p1 = "cb_roundtrip_a.gcbk", p2 = "cb_roundtrip_b.gcbk";
  save_codebook(cb, p1);
  auto loaded = load_codebook(p1);
  CHECK(loaded.k == cb.k);
  CHECK(loaded.centroids == cb.centroids);
  save_codebook(loaded, p2);
  CHECK(io::read_file(p1) == io::read_file(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("truncated codebook files report the byte offset") {
  Codebook cb;
  cb.k = 2;
  cb.centroids = {0, 0, 0, 1, 1, 1};
  std::string path = "cb_trunc.gcbk";
  save_codebook(cb, path);
  auto bytes = io::read_file(path);
  bytes.resize(bytes.size() - 5);
  io::write_file(path, bytes);
  CHECK_THROWS_WITH_AS(load_codebook(path), doctest::Contains("offset"), IoError);
  std::remove(path.c_str());
}
