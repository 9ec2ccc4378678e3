#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gcrl/losses.hpp"
#include "gcrl/model.hpp"

using namespace gcrl;

namespace {

ModelConfig tiny_config(int h, int w, AttentionKind kind, int enc = 1, int dec = 1) {
  ModelConfig c;
  c.height = h;
  c.width = w;
  c.vocab = 5;
  c.d_model = 8;
  c.n_heads = 2;
  c.mlp_mult = 2;
  c.n_enc_blocks = enc;
  c.n_dec_blocks = dec;
  c.attention = kind;
  c.dropout = 0.0f;
  c.proj_hidden = 12;
  c.proj_out = 6;
  return c;
}

IntArray random_tokens(int b, int h, int w, int vocab, std::uint64_t seed) {
  RngStream rng(seed, StreamPurpose::misc, 0, 0);
  IntArray t = IntArray::zeros({b, h, w});
  for (auto& v : t.data) v = static_cast<std::int32_t>(rng.below(static_cast<std::uint32_t>(vocab)));
  return t;
}

void zero_tensor(Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0f); }

} // namespace

TEST_CASE("zeroed residual projections reduce a block to its first LN") {
  auto cfg = tiny_config(3, 3, AttentionKind::dense);
  auto model = GcrlModel::init(cfg, 1);
  auto& blk = model.enc_blocks[0];
  zero_tensor(blk.wo);
  zero_tensor(blk.bo);
  zero_tensor(blk.fc2_w);
  zero_tensor(blk.fc2_b);
  RngStream rng(2, StreamPurpose::misc, 0, 0);
  auto h = Tensor::randn({2, 3, 3, 8}, rng);
  ForwardCtx ctx;
  auto out = model.block_forward(h, blk, ctx, "t");
  auto expect = add(mul(layer_norm(h, -1, kLayerNormEps), blk.ln1_g), blk.ln1_b);
  for (std::size_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-6));
}

TEST_CASE("a 1x1 grid depends only on its single token") {
  auto cfg = tiny_config(1, 1, AttentionKind::dense);
  auto model = GcrlModel::init(cfg, 3);
  ForwardCtx ctx;
  IntArray a = IntArray::zeros({1, 1, 1});
  IntArray b = IntArray::zeros({1, 1, 1});
  a.data[0] = 1;
  b.data[0] = 3;
  auto ra = model.encode_representation(a, ctx);
  auto rb = model.encode_representation(b, ctx);
  bool differ = false;
  for (std::size_t i = 0; i < ra.numel(); ++i) differ = differ || ra.data()[i] != rb.data()[i];
  CHECK(differ);
}

static void check_causality(AttentionKind kind, int H, int W) {
  auto cfg = tiny_config(H, W, kind, 1, 1);
  auto model = GcrlModel::init(cfg, 11);
  ForwardCtx ctx; // eval mode
  auto base_tokens = random_tokens(1, H, W, cfg.vocab, 17);
  auto base = model.decoder_logits(base_tokens, ctx);
  int D = H * W;
  for (int tp = 0; tp < D; ++tp) {
    IntArray perturbed = base_tokens;
    perturbed.data[static_cast<std::size_t>(tp)] =
        (perturbed.data[static_cast<std::size_t>(tp)] + 1) % cfg.vocab;
    auto out = model.decoder_logits(perturbed, ctx);
    bool changed_after = false;
    for (int t = 0; t < D; ++t)
      for (int v = 0; v < cfg.vocab; ++v) {
        float lhs = out.data()[static_cast<std::size_t>(t) * cfg.vocab + v];
        float rhs = base.data()[static_cast<std::size_t>(t) * cfg.vocab + v];
        if (t < tp) {
          CHECK(lhs == rhs); // bit-exact causality
        } else if (lhs != rhs) {
          changed_after = true;
        }
      }
    CHECK(changed_after); // the perturbation is visible somewhere at or after tp
  }
}

TEST_CASE("dense attention is strictly raster-causal on 3x3 and 4x4 grids") {
  check_causality(AttentionKind::dense, 3, 3);
  check_causality(AttentionKind::dense, 4, 4);
}

TEST_CASE("axial attention is strictly raster-causal on 3x3 and 4x4 grids") {
  check_causality(AttentionKind::axial, 3, 3);
  check_causality(AttentionKind::axial, 4, 4);
}

TEST_CASE("the shifted axial intermediate has an exactly zero first row") {
  auto cfg = tiny_config(4, 4, AttentionKind::axial);
  auto model = GcrlModel::init(cfg, 5);
  RngStream rng(6, StreamPurpose::misc, 0, 0);
  auto h = Tensor::randn({2, 4, 4, 8}, rng);
  AxialDebugT<float> dbg;
  axial_attention(h, model.enc_blocks[0], cfg.n_heads, &dbg);
  REQUIRE(dbg.shifted.defined());
  // row 0 of every batch entry
  for (int b = 0; b < 2; ++b)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 8; ++c) CHECK(dbg.shifted.data()[((b * 4 + 0) * 4 + x) * 8 + c] == 0.0f);
}

TEST_CASE("single-row grids reduce axial attention to causal row attention") {
  auto cfg_ax = tiny_config(1, 6, AttentionKind::axial);
  auto model = GcrlModel::init(cfg_ax, 21);
  RngStream rng(8, StreamPurpose::misc, 0, 0);
  auto h = Tensor::randn({2, 1, 6, 8}, rng);
  auto ax = axial_attention(h, model.enc_blocks[0], cfg_ax.n_heads);
  auto dense = dense_causal_attention(reshape(h, {2, 6, 8}), model.enc_blocks[0], cfg_ax.n_heads);
  for (std::size_t i = 0; i < ax.numel(); ++i) CHECK(ax.data()[i] == dense.data()[i]);
}

TEST_CASE("attention-entry counters match the closed forms at three sizes") {
  struct Case {
    int h, w;
  } cases[] = {{4, 4}, {3, 5}, {2, 6}};
  for (auto [H, W] : cases) {
    for (auto kind : {AttentionKind::dense, AttentionKind::axial}) {
      auto cfg = tiny_config(H, W, kind, 1, 0);
      auto model = GcrlModel::init(cfg, 7);
      ForwardCtx ctx;
      auto tokens = random_tokens(3, H, W, cfg.vocab, 23);
      reset_attention_entries();
      model.encode_representation(tokens, ctx);
      std::uint64_t D = static_cast<std::uint64_t>(H) * W;
      std::uint64_t expected =
          kind == AttentionKind::dense
              ? 3ull * cfg.n_heads * D * D
              : 3ull * cfg.n_heads *
                    (static_cast<std::uint64_t>(H) * W * W + static_cast<std::uint64_t>(W) * H * H +
                     static_cast<std::uint64_t>(H) * W * W);
      CHECK(attention_entries() == expected);
    }
  }
  // the specific 4x4 single-head counts: dense 256, axial 192 per image
  auto cfg = tiny_config(4, 4, AttentionKind::dense, 1, 0);
  cfg.n_heads = 1;
  auto model = GcrlModel::init(cfg, 7);
  ForwardCtx ctx;
  auto tokens = random_tokens(1, 4, 4, cfg.vocab, 29);
  reset_attention_entries();
  model.encode_representation(tokens, ctx);
  CHECK(attention_entries() == 256);
  cfg.attention = AttentionKind::axial;
  auto model2 = GcrlModel::init(cfg, 7);
  reset_attention_entries();
  model2.encode_representation(tokens, ctx);
  CHECK(attention_entries() == 192);
}

TEST_CASE("parameter count matches the closed-form expression") {
  auto count_params = [](const ModelConfig& c) -> std::int64_t {
    std::int64_t d = c.d_model;
    std::int64_t block = 2 * d                    // ln1
                         + 4 * (d * d + d)        // q, k, v, o with biases
                         + 2 * d                  // ln2
                         + d * (c.mlp_mult * d) + c.mlp_mult * d // fc1
                         + (c.mlp_mult * d) * d + d;             // fc2
    std::int64_t total = static_cast<std::int64_t>(c.vocab) * d // token embedding
                         + c.height * d + c.width * d           // positions
                         + c.total_blocks() * block + 2 * d;    // final LN
    if (c.n_dec_blocks > 0) total += 2 * d + d * c.vocab;       // dec LN + head
    total += d * c.proj_hidden + c.proj_hidden                  // proj fc1
             + 2 * c.proj_hidden                                // proj LN
             + c.proj_hidden * c.proj_out + c.proj_out;         // proj fc2
    if (c.n_classes > 0) total += d * c.n_classes + c.n_classes;
    return total;
  };
  for (auto cfg : {tiny_config(4, 4, AttentionKind::axial, 2, 2), tiny_config(3, 5, AttentionKind::dense, 1, 0)}) {
    auto model = GcrlModel::init(cfg, 0);
    std::int64_t actual = 0;
    for (auto& p : model.parameters()) actual += static_cast<std::int64_t>(p.tensor->numel());
    CHECK(actual == count_params(cfg));
  }
  auto with_cls = tiny_config(4, 4, AttentionKind::axial, 1, 1);
  with_cls.n_classes = 3;
  auto model = GcrlModel::init(with_cls, 0);
  std::int64_t actual = 0;
  for (auto& p : model.parameters()) actual += static_cast<std::int64_t>(p.tensor->numel());
  CHECK(actual == count_params(with_cls));
}

TEST_CASE("permuting the batch permutes representations with no cross-talk") {
  auto cfg = tiny_config(3, 3, AttentionKind::axial);
  auto model = GcrlModel::init(cfg, 9);
  ForwardCtx ctx;
  auto tokens = random_tokens(3, 3, 3, cfg.vocab, 31);
  auto reps = model.encode_representation(tokens, ctx);
  // swap samples 0 and 2
  IntArray swapped = tokens;
  for (int i = 0; i < 9; ++i)
    std::swap(swapped.data[static_cast<std::size_t>(i)], swapped.data[static_cast<std::size_t>(18 + i)]);
  auto reps2 = model.encode_representation(swapped, ctx);
  for (int j = 0; j < cfg.d_model; ++j) {
    CHECK(reps2.data()[static_cast<std::size_t>(j)] == reps.data()[static_cast<std::size_t>(2 * cfg.d_model + j)]);
    CHECK(reps2.data()[static_cast<std::size_t>(2 * cfg.d_model + j)] == reps.data()[static_cast<std::size_t>(j)]);
  }
}

TEST_CASE("eval-mode forwards are bitwise repeatable and training differs only by dropout") {
  auto cfg = tiny_config(3, 3, AttentionKind::axial);
  cfg.dropout = 0.2f;
  auto model = GcrlModel::init(cfg, 10);
  auto tokens = random_tokens(2, 3, 3, cfg.vocab, 37);
  ForwardCtx eval_ctx;
  auto r1 = model.encode_representation(tokens, eval_ctx);
  auto r2 = model.encode_representation(tokens, eval_ctx);
  CHECK(r1.data() == r2.data());
  RngStream drop(1, StreamPurpose::dropout, 0, 0);
  ForwardCtx train_ctx{true, &drop};
  auto rt = model.encode_representation(tokens, train_ctx);
  bool differ = false;
  for (std::size_t i = 0; i < rt.numel(); ++i) differ = differ || rt.data()[i] != r1.data()[i];
  CHECK(differ);
}

TEST_CASE("representations have d_model dims and projections unit rows") {
  auto cfg = tiny_config(4, 4, AttentionKind::axial);
  auto model = GcrlModel::init(cfg, 12);
  ForwardCtx ctx;
  auto tokens = random_tokens(3, 4, 4, cfg.vocab, 41);
  auto rep = model.encode_representation(tokens, ctx);
  CHECK(rep.shape() == Shape{3, cfg.d_model});
  auto z = model.project(rep);
  CHECK(z.shape() == Shape{3, cfg.proj_out});
  for (int i = 0; i < 3; ++i) {
    double ss = 0;
    for (int j = 0; j < cfg.proj_out; ++j) {
      double v = z.data()[static_cast<std::size_t>(i) * cfg.proj_out + j];
      ss += v * v;
    }
    CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-6);
  }
}

TEST_CASE("decoder-free models reject decoder_logits") {
  auto cfg = tiny_config(3, 3, AttentionKind::dense, 2, 0);
  auto model = GcrlModel::init(cfg, 13);
  ForwardCtx ctx;
  auto tokens = random_tokens(1, 3, 3, cfg.vocab, 43);
  CHECK_THROWS_AS(model.decoder_logits(tokens, ctx), ValueError);
}

TEST_CASE("a zeroed output head yields the uniform distribution at every position") {
  auto cfg = tiny_config(3, 3, AttentionKind::axial);
  auto model = GcrlModel::init(cfg, 14);
  zero_tensor(model.out_head);
  ForwardCtx ctx;
  auto tokens = random_tokens(2, 3, 3, cfg.vocab, 47);
  auto logits = model.decoder_logits(tokens, ctx);
  auto probs = softmax(logits, 2);
  for (std::size_t i = 0; i < probs.numel(); ++i)
    CHECK(probs.data()[i] == doctest::Approx(1.0f / cfg.vocab).epsilon(1e-6));
  // probabilities sum to one per position
  for (int t = 0; t < 9 * 2; ++t) {
    double s = 0;
    for (int v = 0; v < cfg.vocab; ++v) s += probs.data()[static_cast<std::size_t>(t) * cfg.vocab + v];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  // and the NLL equals (D-1) ln K
  auto nll = generative_nll(logits, tokens);
  CHECK(nll.item() == doctest::Approx(8.0 * std::log(5.0)).epsilon(1e-5));
}

TEST_CASE("out-of-vocabulary tokens are rejected") {
  auto cfg = tiny_config(2, 2, AttentionKind::dense);
  auto model = GcrlModel::init(cfg, 15);
  ForwardCtx ctx;
  IntArray tokens = IntArray::zeros({1, 2, 2});
  tokens.data[0] = cfg.vocab;
  CHECK_THROWS_AS(model.encode_representation(tokens, ctx), ValueError);
}
