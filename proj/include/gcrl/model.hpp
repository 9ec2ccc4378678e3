#pragma once

// Token transformer split into an encoder stack (pooled, contrastively
// projected representation) and a decoder stack (next-token logits). Both
// stacks share the block structure
//
//   h <- LN(h);  h <- h + Dropout(Attn(h));  h <- h + Dropout(MLP(LN(h)))
//
// where Attn is either dense causal self-attention over the raster-flattened
// sequence or the factorized axial block: unmasked row attention, causal
// column attention, a one-row downward shift (row 0 zero-filled), and causal
// row attention over input-plus-shifted. The three axial applications share
// one parameter set per block, and the composite receptive field of output
// (r, c) is exactly the raster prefix {rows < r} ∪ {(r, c') : c' <= c}.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "gcrl/quantizer.hpp"
#include "gcrl/tensor.hpp"

namespace gcrl {

enum class AttentionKind { axial, dense };

struct ModelConfig {
  int height = 16;
  int width = 16;
  int vocab = 16;
  int d_model = 64;
  int n_heads = 4;
  int mlp_mult = 4;
  int n_enc_blocks = 2;
  int n_dec_blocks = 2;
  AttentionKind attention = AttentionKind::axial;
  float dropout = 0.1f;
  int proj_hidden = 1024;
  int proj_out = 64;
  int n_classes = 0; // > 0 adds a linear classifier head on the pooled representation

  int seq_len() const { return height * width; }
  int total_blocks() const { return n_enc_blocks + n_dec_blocks; }

  void validate() const {
    if (height < 1 || width < 1) throw ValueError("ModelConfig: empty grid");
    if (vocab < 1) throw ValueError("ModelConfig: vocab must be positive");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw ValueError("ModelConfig: d_model " + std::to_string(d_model) +
                       " not divisible by n_heads " + std::to_string(n_heads));
    if (n_enc_blocks < 1) throw ValueError("ModelConfig: need at least one encoder block");
    if (n_dec_blocks < 0) throw ValueError("ModelConfig: negative decoder depth");
    if (mlp_mult < 1) throw ValueError("ModelConfig: mlp_mult must be positive");
    if (dropout < 0.0f || dropout >= 1.0f) throw ValueError("ModelConfig: dropout must be in [0, 1)");
    if (proj_hidden < 1 || proj_out < 1) throw ValueError("ModelConfig: projection dims must be positive");
  }
};

struct ForwardCtx {
  bool training = false;
  RngStream* rng = nullptr;
};

// Instrumentation: attention-score entries computed since the last reset.
inline std::atomic<std::uint64_t>& attention_entry_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
inline void reset_attention_entries() { attention_entry_counter().store(0); }
inline std::uint64_t attention_entries() { return attention_entry_counter().load(); }

template <typename S>
struct BlockParamsT {
  TensorT<S> ln1_g, ln1_b;
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> ln2_g, ln2_b;
  TensorT<S> fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename S>
struct NamedParamT {
  std::string name;
  TensorT<S>* tensor;
  bool decay; // true = subject to weight decay
};

constexpr float kLayerNormEps = 1e-5f;

namespace detail {

// One causal mask per sequence length, cached: mask[i][j] = 1 where j > i.
inline const IntArray& causal_mask(int L) {
  static std::mutex mu;
  static std::map<int, IntArray> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(L);
  if (it == cache.end()) {
    IntArray m = IntArray::zeros({1, L, L});
    for (int i = 0; i < L; ++i)
      for (int j = i + 1; j < L; ++j) m.data[static_cast<std::size_t>(i) * L + j] = 1;
    it = cache.emplace(L, std::move(m)).first;
  }
  return it->second;
}

} // namespace detail

// Multi-head self-attention over x of shape rows x L x d. All three axial
// applications and the dense path go through here with one parameter set.
template <typename S>
TensorT<S> multi_head_attention(const TensorT<S>& x, const BlockParamsT<S>& p, int n_heads,
                                bool causal) {
  int rows = x.dim(0), L = x.dim(1), d = x.dim(2);
  int hd = d / n_heads;
  auto split_heads = [&](TensorT<S> t) {
    t = reshape(t, {rows, L, n_heads, hd});
    t = permute(t, {0, 2, 1, 3});
    return reshape(t, {rows * n_heads, L, hd});
  };
  auto q = split_heads(add(matmul(x, p.wq), p.bq));
  auto k = split_heads(add(matmul(x, p.wk), p.bk));
  auto v = split_heads(add(matmul(x, p.wv), p.bv));

  auto scores = scale(matmul_nt(q, k), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
  attention_entry_counter() += static_cast<std::uint64_t>(rows) * n_heads * L * L;
  if (causal)
    scores = masked_fill(scores, detail::causal_mask(L), -std::numeric_limits<S>::infinity());
  auto weights = softmax(scores, 2);
  auto ctx = matmul(weights, v); // rows*heads, L, hd
  ctx = reshape(ctx, {rows, n_heads, L, hd});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {rows, L, d});
  return add(matmul(ctx, p.wo), p.bo);
}

template <typename S>
struct AxialDebugT {
  TensorT<S> row_attended;   // after step 1, B x H x W x d
  TensorT<S> shifted;        // after steps 2-3, B x H x W x d
};

// Factorized causal attention over a B x H x W x d grid (see file header).
template <typename S>
TensorT<S> axial_attention(const TensorT<S>& h, const BlockParamsT<S>& p, int n_heads,
                           AxialDebugT<S>* debug = nullptr) {
  if (h.rank() != 4) throw ShapeError("axial_attention: expected B x H x W x d, got " + shape_str(h.shape()));
  int B = h.dim(0), H = h.dim(1), W = h.dim(2), d = h.dim(3);
  if (H < 1 || W < 1) throw ShapeError("axial_attention: empty grid");

  // 1. unmasked row-wise attention
  auto ha = multi_head_attention(reshape(h, {B * H, W, d}), p, n_heads, false);
  ha = reshape(ha, {B, H, W, d});
  if (debug) debug->row_attended = ha;
  ha = permute(ha, {0, 2, 1, 3}); // B, W, H, d

  // 2. causal column-wise attention
  ha = multi_head_attention(reshape(ha, {B * W, H, d}), p, n_heads, true);
  ha = permute(reshape(ha, {B, W, H, d}), {0, 2, 1, 3}); // B, H, W, d

  // 3. shift down one row, zero-filling row 0
  auto zero_row = TensorT<S>::zeros({B, 1, W, d});
  ha = concat<S>({zero_row, slice_axis(ha, 1, 0, H - 1)}, 1);
  if (debug) debug->shifted = ha;

  // 4. causal row-wise attention over input plus shifted context
  auto out = multi_head_attention(reshape(add(h, ha), {B * H, W, d}), p, n_heads, true);
  return reshape(out, {B, H, W, d});
}

// Standard causal attention over the raster-flattened sequence.
template <typename S>
TensorT<S> dense_causal_attention(const TensorT<S>& h_flat, const BlockParamsT<S>& p, int n_heads) {
  if (h_flat.rank() != 3)
    throw ShapeError("dense_causal_attention: expected B x D x d, got " + shape_str(h_flat.shape()));
  return multi_head_attention(h_flat, p, n_heads, true);
}

template <typename S>
class GcrlModelT {
public:
  ModelConfig cfg;

  TensorT<S> token_embedding; // vocab x d
  TensorT<S> row_pos;         // H x d
  TensorT<S> col_pos;         // W x d
  std::vector<BlockParamsT<S>> enc_blocks;
  TensorT<S> final_ln_g, final_ln_b; // encoder-side representation LN
  std::vector<BlockParamsT<S>> dec_blocks;
  TensorT<S> dec_final_ln_g, dec_final_ln_b;
  TensorT<S> out_head; // d x vocab
  TensorT<S> proj_fc1_w, proj_fc1_b, proj_ln_g, proj_ln_b, proj_fc2_w, proj_fc2_b;
  TensorT<S> cls_w, cls_b; // only when cfg.n_classes > 0

  static GcrlModelT init(const ModelConfig& cfg, std::uint64_t seed);

  std::vector<NamedParamT<S>> parameters();

  // -- forward pieces -------------------------------------------------------

  // Token lookup only; this is the array the unsupervised OOD score
  // differentiates (positions are added afterwards).
  TensorT<S> embed_tokens(const IntArray& tokens_bhw) const {
    if (tokens_bhw.shape.size() != 3 || tokens_bhw.shape[1] != cfg.height ||
        tokens_bhw.shape[2] != cfg.width)
      throw ShapeError("embed_tokens: expected B x " + std::to_string(cfg.height) + " x " +
                       std::to_string(cfg.width) + " token grid, got " + shape_str(tokens_bhw.shape));
    return embedding_lookup(token_embedding, tokens_bhw);
  }

  TensorT<S> add_positions(const TensorT<S>& emb) const {
    int H = cfg.height, W = cfg.width, d = cfg.d_model;
    auto pos = add(reshape(row_pos, {H, 1, d}), reshape(col_pos, {1, W, d})); // H x W x d
    return add(emb, pos);
  }

  TensorT<S> run_encoder(TensorT<S> h, const ForwardCtx& ctx) const {
    for (std::size_t i = 0; i < enc_blocks.size(); ++i)
      h = block_forward(h, enc_blocks[i], ctx, "enc." + std::to_string(i));
    return h;
  }

  TensorT<S> run_decoder(TensorT<S> h, const ForwardCtx& ctx) const {
    for (std::size_t i = 0; i < dec_blocks.size(); ++i)
      h = block_forward(h, dec_blocks[i], ctx, "dec." + std::to_string(i));
    return h;
  }

  // LN (encoder-side parameters) then global average pooling over positions.
  TensorT<S> pool_representation(const TensorT<S>& grid) const {
    return pool_with_ln(grid, final_ln_g, final_ln_b);
  }

  TensorT<S> pool_with_ln(const TensorT<S>& grid, const TensorT<S>& g, const TensorT<S>& b) const {
    int B = grid.dim(0);
    auto normed = add(mul(layer_norm(grid, -1, static_cast<S>(kLayerNormEps)), g), b);
    auto flat = reshape(normed, {B, cfg.seq_len(), cfg.d_model});
    return mean_axis(flat, 1); // B x d
  }

  TensorT<S> logits_from_grid(const TensorT<S>& enc_out, const ForwardCtx& ctx) const {
    if (cfg.n_dec_blocks < 1)
      throw ValueError("decoder_logits: model has no decoder blocks");
    auto h = run_decoder(enc_out, ctx);
    auto normed = add(mul(layer_norm(h, -1, static_cast<S>(kLayerNormEps)), dec_final_ln_g), dec_final_ln_b);
    auto flat = reshape(normed, {h.dim(0), cfg.seq_len(), cfg.d_model});
    return matmul(flat, out_head); // B x D x vocab
  }

  TensorT<S> classifier_logits(const TensorT<S>& rep) const {
    if (cfg.n_classes < 1) throw ValueError("classifier_logits: model has no class head");
    return add(matmul(rep, cls_w), cls_b);
  }

  // One transformer block; attention kind from the config.
  TensorT<S> block_forward(const TensorT<S>& h_in, const BlockParamsT<S>& p, const ForwardCtx& ctx,
                           const std::string& block_name) const {
    auto ln = [&](const TensorT<S>& t, const TensorT<S>& g, const TensorT<S>& b) {
      return add(mul(layer_norm(t, -1, static_cast<S>(kLayerNormEps)), g), b);
    };
    auto drop = [&](const TensorT<S>& t) {
      return dropout(t, static_cast<double>(cfg.dropout), ctx.rng, ctx.training);
    };
    int B = h_in.dim(0);

    auto h = ln(h_in, p.ln1_g, p.ln1_b);
    TensorT<S> attn;
    if (cfg.attention == AttentionKind::axial) {
      attn = axial_attention(h, p, cfg.n_heads);
    } else {
      auto flat = reshape(h, {B, cfg.seq_len(), cfg.d_model});
      attn = reshape(dense_causal_attention(flat, p, cfg.n_heads),
                     {B, cfg.height, cfg.width, cfg.d_model});
    }
    h = add(h, drop(attn));

    auto m = ln(h, p.ln2_g, p.ln2_b);
    m = add(matmul(m, p.fc1_w), p.fc1_b);
    m = gelu(m);
    m = add(matmul(m, p.fc2_w), p.fc2_b);
    h = add(h, drop(m));

    for (S v : h.data())
      if (std::isnan(v))
        throw ValueError("block_forward: NaN activation in block " + block_name);
    return h;
  }

  // -- published operations -------------------------------------------------

  // Pooled encoder representation of a token batch (the downstream feature).
  TensorT<S> encode_representation(const IntArray& tokens, const ForwardCtx& ctx) const {
    auto h = run_encoder(add_positions(embed_tokens(tokens)), ctx);
    return pool_representation(h);
  }

  // Two-layer projection head with layer norm, L2-normalized output rows.
  TensorT<S> project(const TensorT<S>& rep) const {
    auto h = add(matmul(rep, proj_fc1_w), proj_fc1_b);
    h = add(mul(layer_norm(h, -1, static_cast<S>(kLayerNormEps)), proj_ln_g), proj_ln_b);
    h = gelu(h);
    h = add(matmul(h, proj_fc2_w), proj_fc2_b);
    return l2_normalize(h, 1);
  }

  // Next-token logits; the entry at raster position t parameterizes the
  // distribution of token t+1. Position 1 is never predicted, so the final
  // position's logits exist but are never consumed by the loss.
  TensorT<S> decoder_logits(const IntArray& tokens, const ForwardCtx& ctx) const {
    auto enc_out = run_encoder(add_positions(embed_tokens(tokens)), ctx);
    return logits_from_grid(enc_out, ctx);
  }

  TensorT<S> decoder_logits_from_embedding(const TensorT<S>& emb, const ForwardCtx& ctx) const {
    auto enc_out = run_encoder(add_positions(emb), ctx);
    return logits_from_grid(enc_out, ctx);
  }
};

using GcrlModel = GcrlModelT<float>;

// Batch of token grids packed as B x H x W ids.
inline IntArray pack_token_grids(const std::vector<TokenGrid>& grids) {
  if (grids.empty()) throw ValueError("pack_token_grids: empty batch");
  int H = grids[0].height, W = grids[0].width;
  IntArray out = IntArray::zeros({static_cast<int>(grids.size()), H, W});
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b].height != H || grids[b].width != W)
      throw ShapeError("pack_token_grids: grids disagree on size");
    std::copy(grids[b].tokens.begin(), grids[b].tokens.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(b) * H * W);
  }
  return out;
}

template <typename S>
GcrlModelT<S> GcrlModelT<S>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  GcrlModelT<S> m;
  m.cfg = cfg;
  int d = cfg.d_model;
  std::uint64_t ordinal = 0;
  auto normal = [&](Shape shape, double stddev) {
    RngStream rng(seed, StreamPurpose::init, 0, ordinal++);
    return TensorT<S>::randn(std::move(shape), rng, 0.0, stddev, true);
  };
  auto zeros = [&](Shape shape) {
    ++ordinal;
    return TensorT<S>::zeros(std::move(shape), true);
  };
  auto ones = [&](Shape shape) {
    ++ordinal;
    return TensorT<S>::filled(std::move(shape), S(1), true);
  };

  const double base_std = 0.02;
  // residual-branch output projections get a depth-scaled init
  const double resid_std = base_std / std::sqrt(2.0 * std::max(1, cfg.total_blocks()));

  m.token_embedding = normal({cfg.vocab, d}, base_std);
  m.row_pos = normal({cfg.height, d}, base_std);
  m.col_pos = normal({cfg.width, d}, base_std);

  auto make_block = [&]() {
    BlockParamsT<S> b;
    b.ln1_g = ones({d});
    b.ln1_b = zeros({d});
    b.wq = normal({d, d}, base_std);
    b.bq = zeros({d});
    b.wk = normal({d, d}, base_std);
    b.bk = zeros({d});
    b.wv = normal({d, d}, base_std);
    b.bv = zeros({d});
    b.wo = normal({d, d}, resid_std);
    b.bo = zeros({d});
    b.ln2_g = ones({d});
    b.ln2_b = zeros({d});
    b.fc1_w = normal({d, cfg.mlp_mult * d}, base_std);
    b.fc1_b = zeros({cfg.mlp_mult * d});
    b.fc2_w = normal({cfg.mlp_mult * d, d}, resid_std);
    b.fc2_b = zeros({d});
    return b;
  };

  for (int i = 0; i < cfg.n_enc_blocks; ++i) m.enc_blocks.push_back(make_block());
  m.final_ln_g = ones({d});
  m.final_ln_b = zeros({d});
  for (int i = 0; i < cfg.n_dec_blocks; ++i) m.dec_blocks.push_back(make_block());
  if (cfg.n_dec_blocks > 0) {
    m.dec_final_ln_g = ones({d});
    m.dec_final_ln_b = zeros({d});
    m.out_head = normal({d, cfg.vocab}, base_std);
  }
  m.proj_fc1_w = normal({d, cfg.proj_hidden}, base_std);
  m.proj_fc1_b = zeros({cfg.proj_hidden});
  m.proj_ln_g = ones({cfg.proj_hidden});
  m.proj_ln_b = zeros({cfg.proj_hidden});
  m.proj_fc2_w = normal({cfg.proj_hidden, cfg.proj_out}, base_std);
  m.proj_fc2_b = zeros({cfg.proj_out});
  if (cfg.n_classes > 0) {
    m.cls_w = normal({d, cfg.n_classes}, base_std);
    m.cls_b = zeros({cfg.n_classes});
  }
  return m;
}

template <typename S>
std::vector<NamedParamT<S>> GcrlModelT<S>::parameters() {
  std::vector<NamedParamT<S>> out;
  auto push = [&](const std::string& name, TensorT<S>& t, bool decay) {
    out.push_back({name, &t, decay});
  };
  // No decay on layer-norm parameters, embedding tables, or bias vectors.
  push("token_embedding", token_embedding, false);
  push("row_pos", row_pos, false);
  push("col_pos", col_pos, false);
  auto push_block = [&](const std::string& prefix, BlockParamsT<S>& b) {
    push(prefix + ".ln1.gain", b.ln1_g, false);
    push(prefix + ".ln1.bias", b.ln1_b, false);
    push(prefix + ".attn.wq", b.wq, true);
    push(prefix + ".attn.bq", b.bq, false);
    push(prefix + ".attn.wk", b.wk, true);
    push(prefix + ".attn.bk", b.bk, false);
    push(prefix + ".attn.wv", b.wv, true);
    push(prefix + ".attn.bv", b.bv, false);
    push(prefix + ".attn.wo", b.wo, true);
    push(prefix + ".attn.bo", b.bo, false);
    push(prefix + ".ln2.gain", b.ln2_g, false);
    push(prefix + ".ln2.bias", b.ln2_b, false);
    push(prefix + ".mlp.fc1_w", b.fc1_w, true);
    push(prefix + ".mlp.fc1_b", b.fc1_b, false);
    push(prefix + ".mlp.fc2_w", b.fc2_w, true);
    push(prefix + ".mlp.fc2_b", b.fc2_b, false);
  };
  for (std::size_t i = 0; i < enc_blocks.size(); ++i)
    push_block("enc." + std::to_string(i), enc_blocks[i]);
  push("final_ln.gain", final_ln_g, false);
  push("final_ln.bias", final_ln_b, false);
  for (std::size_t i = 0; i < dec_blocks.size(); ++i)
    push_block("dec." + std::to_string(i), dec_blocks[i]);
  if (cfg.n_dec_blocks > 0) {
    push("dec_final_ln.gain", dec_final_ln_g, false);
    push("dec_final_ln.bias", dec_final_ln_b, false);
    push("out_head", out_head, true);
  }
  push("proj.fc1_w", proj_fc1_w, true);
  push("proj.fc1_b", proj_fc1_b, false);
  push("proj.ln.gain", proj_ln_g, false);
  push("proj.ln.bias", proj_ln_b, false);
  push("proj.fc2_w", proj_fc2_w, true);
  push("proj.fc2_b", proj_fc2_b, false);
  if (cfg.n_classes > 0) {
    push("cls.weight", cls_w, true);
    push("cls.bias", cls_b, false);
  }
  return out;
}

} // namespace gcrl
