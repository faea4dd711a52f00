#pragma once

// Pre-LN decoder-only transformer: weights, embeddings and the block
// variants the compute policies are built from.
//
// Block variants, with SA(.) and FFN(.) the residual contributions:
//   standard        x1 = x + SA(LN1 x);   out = x1 + FFN(LN2 x1)
//   skip FFN        out = x + SA(LN1 x)
//   skip SA         out = x + FFN(LN2(LN1 x))      (no K/V written)
//   parallel FFN+SA out = x + FFN(LN2 x) + SA(LN1 x)
//   residual        r = standard(x) - x            (used for fused block pairs)

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/numerics.hpp"
#include "skipformer/splitmix.hpp"

namespace skipformer {

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_model = 8;
  std::size_t n_heads = 1;
  std::size_t d_ff = 32;
  std::size_t vocab_size = 16;
  std::size_t max_positions = 32;
  ActivationKind activation = ActivationKind::ReLU;
  float ln_eps = 1e-5f;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ShapeError(std::string("invalid model config: ") + what);
    };
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(n_heads >= 1, "n_heads must be >= 1");
    require(d_ff >= 1, "d_ff must be >= 1");
    require(vocab_size >= 1, "vocab_size must be >= 1");
    require(max_positions >= 1, "max_positions must be >= 1");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(std::isfinite(ln_eps) && ln_eps > 0.0f, "ln_eps must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

// The six prunable linear maps of a block, in storage order.
enum class LinearSlot { Wq, Wk, Wv, Wo, FC1, FC2 };

inline constexpr LinearSlot kLinearSlots[] = {LinearSlot::Wq, LinearSlot::Wk,  LinearSlot::Wv,
                                              LinearSlot::Wo, LinearSlot::FC1, LinearSlot::FC2};

inline const char* to_string(LinearSlot slot) {
  switch (slot) {
    case LinearSlot::Wq: return "wq";
    case LinearSlot::Wk: return "wk";
    case LinearSlot::Wv: return "wv";
    case LinearSlot::Wo: return "wo";
    case LinearSlot::FC1: return "fc1";
    case LinearSlot::FC2: return "fc2";
  }
  return "?";
}

// Linear maps are stored input-major: y = x * W with W of shape (in x out).
struct BlockWeights {
  Vector ln1_gamma, ln1_beta;
  Matrix wq, wk, wv, wo;
  Vector ln2_gamma, ln2_beta;
  Matrix fc1;
  Vector fc1_bias;
  Matrix fc2;
  Vector fc2_bias;

  Matrix& linear(LinearSlot slot) {
    switch (slot) {
      case LinearSlot::Wq: return wq;
      case LinearSlot::Wk: return wk;
      case LinearSlot::Wv: return wv;
      case LinearSlot::Wo: return wo;
      case LinearSlot::FC1: return fc1;
      case LinearSlot::FC2: return fc2;
    }
    throw InternalError("bad linear slot");
  }
  const Matrix& linear(LinearSlot slot) const { return const_cast<BlockWeights*>(this)->linear(slot); }

  // Only the FFN projections carry biases.
  Vector* bias(LinearSlot slot) {
    if (slot == LinearSlot::FC1) return &fc1_bias;
    if (slot == LinearSlot::FC2) return &fc2_bias;
    return nullptr;
  }

  bool operator==(const BlockWeights&) const = default;
};

struct Model {
  ModelConfig config;
  std::vector<BlockWeights> blocks;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_positions x d_model
  Vector final_ln_gamma, final_ln_beta;
  Matrix unembedding;  // d_model x vocab

  bool operator==(const Model&) const = default;
};

// One cached attention entry. Heads are contiguous d_head slices of key/value.
struct KvEntry {
  std::size_t position = 0;
  Vector key;
  Vector value;

  bool operator==(const KvEntry&) const = default;
};

// What a query token may attend to: the prior entries of one layer plus,
// optionally, its own freshly projected entry (visited last).
struct AttentionContext {
  std::span<const KvEntry> cached;
  const KvEntry* self = nullptr;
  std::size_t query_position = 0;

  std::size_t size() const { return cached.size() + (self != nullptr ? 1 : 0); }
};

// Observer for the input of every linear map, used by calibration.
using LinearTap = std::function<void(LinearSlot, std::span<const float>)>;

struct BlockOutput {
  Vector x_out;
  std::optional<KvEntry> kv_write;
};

namespace detail {

inline void tap(const LinearTap& t, LinearSlot slot, std::span<const float> input) {
  if (t) t(slot, input);
}

inline void check_dim(std::span<const float> x, std::size_t dim, const char* what) {
  if (x.size() != dim) {
    throw ShapeError(std::string(what) + ": expected dim " + std::to_string(dim) + ", got " +
                     std::to_string(x.size()));
  }
}

}  // namespace detail

inline Vector ln1(const BlockWeights& b, std::span<const float> x, const ModelConfig& cfg) {
  return layer_norm(x, b.ln1_gamma, b.ln1_beta, cfg.ln_eps);
}

inline Vector ln2(const BlockWeights& b, std::span<const float> x, const ModelConfig& cfg) {
  return layer_norm(x, b.ln2_gamma, b.ln2_beta, cfg.ln_eps);
}

inline KvEntry kv_project(const BlockWeights& b, std::span<const float> x_norm, std::size_t position,
                          const LinearTap& t = {}) {
  detail::tap(t, LinearSlot::Wk, x_norm);
  detail::tap(t, LinearSlot::Wv, x_norm);
  return KvEntry{position, vec_mat(x_norm, b.wk), vec_mat(x_norm, b.wv)};
}

// Multi-head scaled dot-product attention of one query over ctx, projected
// by Wo. Returns the residual contribution.
inline Vector self_attention(const BlockWeights& b, std::span<const float> x_norm, const AttentionContext& ctx,
                             const ModelConfig& cfg, const LinearTap& t = {}) {
  detail::check_dim(x_norm, cfg.d_model, "self_attention");
  if (ctx.size() == 0) throw InternalError("self_attention: empty context");

  std::vector<const KvEntry*> entries;
  entries.reserve(ctx.size());
  for (const KvEntry& e : ctx.cached) entries.push_back(&e);
  if (ctx.self != nullptr) entries.push_back(ctx.self);
  for (const KvEntry* e : entries) {
    if (e->position > ctx.query_position) {
      throw InternalError("self_attention: entry at position " + std::to_string(e->position) +
                          " is after query position " + std::to_string(ctx.query_position));
    }
  }

  detail::tap(t, LinearSlot::Wq, x_norm);
  const Vector q = vec_mat(x_norm, b.wq);
  const std::size_t dh = cfg.d_head();
  const float scale = std::sqrt(static_cast<float>(dh));

  Vector heads(cfg.d_model, 0.0f);
  Vector scores(entries.size());
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t j = 0; j < entries.size(); ++j) {
      float dot = 0.0f;
      for (std::size_t k = 0; k < dh; ++k) dot += q[off + k] * entries[j]->key[off + k];
      scores[j] = dot / scale;
    }
    const Vector p = softmax(scores);
    for (std::size_t k = 0; k < dh; ++k) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < entries.size(); ++j) acc += p[j] * entries[j]->value[off + k];
      heads[off + k] = acc;
    }
  }
  detail::tap(t, LinearSlot::Wo, heads);
  return vec_mat(heads, b.wo);
}

inline Vector ffn(const BlockWeights& b, std::span<const float> x_norm, const ModelConfig& cfg,
                  const LinearTap& t = {}) {
  detail::check_dim(x_norm, cfg.d_model, "ffn");
  detail::tap(t, LinearSlot::FC1, x_norm);
  Vector hidden = add(vec_mat(x_norm, b.fc1), b.fc1_bias);
  hidden = activation(hidden, cfg.activation);
  detail::tap(t, LinearSlot::FC2, hidden);
  return add(vec_mat(hidden, b.fc2), b.fc2_bias);
}

namespace detail {

// LN1, own K/V, attention. ctx.self must be empty: the block supplies it.
inline std::pair<Vector, KvEntry> attend_with_self(const BlockWeights& b, std::span<const float> x,
                                                   const AttentionContext& ctx, const ModelConfig& cfg,
                                                   const LinearTap& t) {
  if (ctx.self != nullptr) throw InternalError("block context already carries a self entry");
  const Vector a = ln1(b, x, cfg);
  KvEntry own = kv_project(b, a, ctx.query_position, t);
  AttentionContext full{ctx.cached, &own, ctx.query_position};
  Vector sa = self_attention(b, a, full, cfg, t);
  return {std::move(sa), std::move(own)};
}

}  // namespace detail

inline BlockOutput block_standard(const BlockWeights& b, std::span<const float> x, const AttentionContext& ctx,
                                  const ModelConfig& cfg, const LinearTap& t = {}) {
  detail::check_dim(x, cfg.d_model, "block_standard");
  auto [sa, own] = detail::attend_with_self(b, x, ctx, cfg, t);
  Vector x1 = add(x, sa);
  Vector f = ffn(b, ln2(b, x1, cfg), cfg, t);
  return {add(x1, f), std::move(own)};
}

inline BlockOutput block_skip_ffn(const BlockWeights& b, std::span<const float> x, const AttentionContext& ctx,
                                  const ModelConfig& cfg, const LinearTap& t = {}) {
  detail::check_dim(x, cfg.d_model, "block_skip_ffn");
  auto [sa, own] = detail::attend_with_self(b, x, ctx, cfg, t);
  return {add(x, sa), std::move(own)};
}

// LN2 is applied on top of LN1, literally.
inline BlockOutput block_skip_sa(const BlockWeights& b, std::span<const float> x, const ModelConfig& cfg,
                                 const LinearTap& t = {}) {
  detail::check_dim(x, cfg.d_model, "block_skip_sa");
  const Vector f = ffn(b, ln2(b, ln1(b, x, cfg), cfg), cfg, t);
  return {add(x, f), std::nullopt};
}

// Summed as (x + FFN) + SA so that Wo = 0 reproduces block_standard bitwise.
inline BlockOutput block_parallel_ffn_sa(const BlockWeights& b, std::span<const float> x,
                                         const AttentionContext& ctx, const ModelConfig& cfg,
                                         const LinearTap& t = {}) {
  detail::check_dim(x, cfg.d_model, "block_parallel_ffn_sa");
  auto [sa, own] = detail::attend_with_self(b, x, ctx, cfg, t);
  const Vector f = ffn(b, ln2(b, x, cfg), cfg, t);
  return {add(add(x, f), sa), std::move(own)};
}

// x_out holds the residual r = standard(x) - x rather than an updated state.
inline BlockOutput block_residual(const BlockWeights& b, std::span<const float> x, const AttentionContext& ctx,
                                  const ModelConfig& cfg, const LinearTap& t = {}) {
  BlockOutput out = block_standard(b, x, ctx, cfg, t);
  out.x_out = sub(out.x_out, x);
  return out;
}

inline Vector embed(const Model& m, std::size_t token_id, std::size_t position) {
  if (token_id >= m.config.vocab_size) {
    throw RangeError("token id " + std::to_string(token_id) + " out of range (vocab " +
                     std::to_string(m.config.vocab_size) + ")");
  }
  if (position >= m.config.max_positions) {
    throw RangeError("position " + std::to_string(position) + " out of range (max_positions " +
                     std::to_string(m.config.max_positions) + ")");
  }
  return add(m.token_embedding.row(token_id), m.position_embedding.row(position));
}

// Perceptual rows arrive already in model space; they still get a position.
inline Vector embed_vector(const Model& m, std::span<const float> v, std::size_t position) {
  detail::check_dim(v, m.config.d_model, "embed_vector");
  if (position >= m.config.max_positions) {
    throw RangeError("position " + std::to_string(position) + " out of range (max_positions " +
                     std::to_string(m.config.max_positions) + ")");
  }
  return add(v, m.position_embedding.row(position));
}

inline Vector unembed(const Model& m, std::span<const float> x) {
  detail::check_dim(x, m.config.d_model, "unembed");
  return vec_mat(layer_norm(x, m.final_ln_gamma, m.final_ln_beta, m.config.ln_eps), m.unembedding);
}

namespace detail {

inline float synth_weight(SplitMix64& rng, double offset = 0.0) {
  return static_cast<float>(rng.next_unit() * 0.2 - 0.1 + offset);
}

inline Vector synth_vector(SplitMix64& rng, std::size_t n, double offset) {
  Vector v(n);
  for (float& x : v) x = synth_weight(rng, offset);
  return v;
}

inline Matrix synth_matrix(SplitMix64& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (float& x : m.data) x = synth_weight(rng);
  return m;
}

}  // namespace detail

// Deterministic model from a SplitMix64 stream. Draw order: each block in
// layer order (ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta, fc1,
// fc1_bias, fc2, fc2_bias), then token embedding, position embedding, final
// LN gamma and beta, unembedding; all row-major. A draw u maps to
// ((u >> 11) / 2^53) * 0.2 - 0.1, plus 1.0 for gamma vectors.
inline Model synth_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  const std::size_t d = cfg.d_model;
  Model m;
  m.config = cfg;
  m.blocks.reserve(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = detail::synth_vector(rng, d, 1.0);
    b.ln1_beta = detail::synth_vector(rng, d, 0.0);
    b.wq = detail::synth_matrix(rng, d, d);
    b.wk = detail::synth_matrix(rng, d, d);
    b.wv = detail::synth_matrix(rng, d, d);
    b.wo = detail::synth_matrix(rng, d, d);
    b.ln2_gamma = detail::synth_vector(rng, d, 1.0);
    b.ln2_beta = detail::synth_vector(rng, d, 0.0);
    b.fc1 = detail::synth_matrix(rng, d, cfg.d_ff);
    b.fc1_bias = detail::synth_vector(rng, cfg.d_ff, 0.0);
    b.fc2 = detail::synth_matrix(rng, cfg.d_ff, d);
    b.fc2_bias = detail::synth_vector(rng, d, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.token_embedding = detail::synth_matrix(rng, cfg.vocab_size, d);
  m.position_embedding = detail::synth_matrix(rng, cfg.max_positions, d);
  m.final_ln_gamma = detail::synth_vector(rng, d, 1.0);
  m.final_ln_beta = detail::synth_vector(rng, d, 0.0);
  m.unembedding = detail::synth_matrix(rng, d, cfg.vocab_size);
  return m;
}

}  // namespace skipformer
