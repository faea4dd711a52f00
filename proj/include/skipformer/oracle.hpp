#pragma once

// Full-recompute reference executor. No KV cache: every call pushes the whole
// sequence through the stack layer by layer with a dense causal mask. A token
// whose action does not run self-attention at a layer has its key/value
// column masked out for every query at that layer.
//
// Only the numeric kernels are shared with the runtime; block assembly,
// masking and fused-pair bookkeeping are written out independently here.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/model.hpp"
#include "skipformer/numerics.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/runtime.hpp"

namespace skipformer::oracle {

struct ForwardResult {
  Vector logits;              // at the last position
  std::vector<Vector> hidden;  // last position, n_layers + 1 states
};

namespace detail {

inline Matrix row_matrix(std::span<const float> v) { return Matrix(1, v.size(), Vector(v.begin(), v.end())); }

inline Vector linear(std::span<const float> x, const Matrix& w) { return matmul(row_matrix(x), w).data; }

inline Vector feed_forward(const BlockWeights& b, std::span<const float> x_norm, ActivationKind act) {
  Vector h = linear(x_norm, b.fc1);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += b.fc1_bias[i];
  h = activation(h, act);
  Vector y = linear(h, b.fc2);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.fc2_bias[i];
  return y;
}

// Attention output (after Wo) of every query row that runs SA. `source` holds
// the LN1 input of each token for this layer; `column` marks which tokens
// expose a key/value column here. Queries are exactly the column tokens.
inline std::vector<Vector> masked_attention(const BlockWeights& b, const std::vector<Vector>& source,
                                            const std::vector<bool>& column, const ModelConfig& cfg) {
  const std::size_t s = source.size();
  const std::size_t d = cfg.d_model;
  Matrix normed(s, d);
  for (std::size_t i = 0; i < s; ++i) {
    if (!column[i]) continue;
    const Vector a = layer_norm(source[i], b.ln1_gamma, b.ln1_beta, cfg.ln_eps);
    std::copy(a.begin(), a.end(), normed.row(i).begin());
  }
  const Matrix q = matmul(normed, b.wq);
  const Matrix k = matmul(normed, b.wk);
  const Matrix v = matmul(normed, b.wv);
  const std::size_t dh = cfg.d_head();
  const float scale = std::sqrt(static_cast<float>(dh));

  std::vector<Vector> out(s);
  for (std::size_t i = 0; i < s; ++i) {
    if (!column[i]) continue;
    std::vector<std::size_t> visible;
    for (std::size_t j = 0; j <= i; ++j)
      if (column[j]) visible.push_back(j);
    Vector concat(d, 0.0f);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = h * dh;
      Vector scores(visible.size());
      for (std::size_t c = 0; c < visible.size(); ++c) {
        float dot = 0.0f;
        for (std::size_t t = 0; t < dh; ++t) dot += q(i, off + t) * k(visible[c], off + t);
        scores[c] = dot / scale;
      }
      const Vector p = softmax(scores);
      for (std::size_t t = 0; t < dh; ++t) {
        float acc = 0.0f;
        for (std::size_t c = 0; c < visible.size(); ++c) acc += p[c] * v(visible[c], off + t);
        concat[off + t] = acc;
      }
    }
    out[i] = linear(concat, b.wo);
  }
  return out;
}

inline Vector plus(const Vector& a, const Vector& b) {
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline Vector minus(const Vector& a, const Vector& b) {
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

// Full pre-LN block given an already computed attention output.
inline Vector full_block(const BlockWeights& b, const Vector& x, const Vector& sa, const ModelConfig& cfg) {
  const Vector x1 = plus(x, sa);
  return plus(x1, feed_forward(b, layer_norm(x1, b.ln2_gamma, b.ln2_beta, cfg.ln_eps), cfg.activation));
}

}  // namespace detail

inline ForwardResult oracle_forward(const Model& model, const LayerSchedule& schedule, const ComputePolicy& policy,
                                    std::span<const TokenClass> token_classes, const Matrix& embedded_sequence) {
  const ModelConfig& cfg = model.config;
  const std::size_t s = embedded_sequence.rows;
  if (s == 0) throw ShapeError("oracle_forward: empty sequence");
  if (token_classes.size() != s) throw ShapeError("oracle_forward: class count != sequence length");
  if (embedded_sequence.cols != cfg.d_model) throw ShapeError("oracle_forward: sequence width != d_model");
  if (schedule.n_layers != cfg.n_layers) throw PolicyError("oracle_forward: schedule does not match model depth");

  std::vector<Vector> x(s);
  for (std::size_t i = 0; i < s; ++i) x[i] = Vector(embedded_sequence.row(i).begin(), embedded_sequence.row(i).end());

  // Fused pairs: input and partial sum carried from the lead to the partner layer.
  std::vector<std::optional<Vector>> lead_input(s), lead_partial(s);

  ForwardResult result;
  result.hidden.assign(cfg.n_layers + 1, {});
  result.hidden[0] = x[s - 1];

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const BlockWeights& b = model.blocks[l];
    std::vector<ActionKind> act(s);
    std::vector<bool> column(s);
    std::vector<Vector> source(s);
    for (std::size_t i = 0; i < s; ++i) {
      act[i] = action_for(schedule, l, token_classes[i], policy.scope).kind;
      column[i] = act[i] != ActionKind::SkipBlock && act[i] != ActionKind::SkipSA;
      if (act[i] == ActionKind::ParallelAbsorbed) {
        if (!lead_input[i]) throw InternalError("oracle: absorbed layer without lead");
        source[i] = *lead_input[i];
      } else {
        source[i] = x[i];
      }
    }
    const std::vector<Vector> sa = detail::masked_attention(b, source, column, cfg);

    for (std::size_t i = 0; i < s; ++i) {
      const Vector& xi = x[i];
      switch (act[i]) {
        case ActionKind::Execute: x[i] = detail::full_block(b, xi, sa[i], cfg); break;
        case ActionKind::SkipBlock: break;
        case ActionKind::SkipFFN: x[i] = detail::plus(xi, sa[i]); break;
        case ActionKind::SkipSA: {
          const Vector n1 = layer_norm(xi, b.ln1_gamma, b.ln1_beta, cfg.ln_eps);
          const Vector n2 = layer_norm(n1, b.ln2_gamma, b.ln2_beta, cfg.ln_eps);
          x[i] = detail::plus(xi, detail::feed_forward(b, n2, cfg.activation));
          break;
        }
        case ActionKind::ParallelFFNSA: {
          const Vector f =
              detail::feed_forward(b, layer_norm(xi, b.ln2_gamma, b.ln2_beta, cfg.ln_eps), cfg.activation);
          x[i] = detail::plus(detail::plus(xi, f), sa[i]);
          break;
        }
        case ActionKind::ParallelLead: {
          const Vector r = detail::minus(detail::full_block(b, xi, sa[i], cfg), xi);
          lead_input[i] = xi;
          lead_partial[i] = detail::plus(xi, r);
          break;
        }
        case ActionKind::ParallelAbsorbed: {
          const Vector& in = *lead_input[i];
          const Vector r = detail::minus(detail::full_block(b, in, sa[i], cfg), in);
          x[i] = detail::plus(*lead_partial[i], r);
          lead_input[i].reset();
          lead_partial[i].reset();
          if (i == s - 1) result.hidden[l] = x[i];
          break;
        }
      }
    }
    if (act[s - 1] != ActionKind::ParallelLead) result.hidden[l + 1] = x[s - 1];
  }

  const Vector& last = x[s - 1];
  const Vector normed = layer_norm(last, model.final_ln_gamma, model.final_ln_beta, cfg.ln_eps);
  result.logits = detail::linear(normed, model.unembedding);
  return result;
}

struct OracleResult {
  std::vector<std::size_t> tokens;
  std::vector<Vector> step_logits;
  std::vector<std::vector<Vector>> step_hidden;  // hidden states of the predicting position, per step
};

// Prompt rows plus generated ids, each with its position embedding added.
inline Matrix embed_sequence(const Model& model, const PromptInput& prompt, std::span<const std::size_t> generated) {
  const ModelConfig& cfg = model.config;
  const std::size_t s = prompt.length() + generated.size();
  if (s > cfg.max_positions) throw CapacityError("oracle: sequence longer than max_positions");
  Matrix seq(s, cfg.d_model);
  for (std::size_t p = 0; p < s; ++p) {
    std::span<const float> base;
    if (p < prompt.perceptual.rows) {
      base = prompt.perceptual.row(p);
    } else {
      const std::size_t q = p - prompt.perceptual.rows;
      const std::size_t id = q < prompt.text_ids.size() ? prompt.text_ids[q] : generated[q - prompt.text_ids.size()];
      if (id >= cfg.vocab_size) throw RangeError("oracle: token id " + std::to_string(id) + " out of range");
      base = model.token_embedding.row(id);
    }
    if (base.size() != cfg.d_model) throw ShapeError("oracle: perceptual row width != d_model");
    for (std::size_t c = 0; c < cfg.d_model; ++c) seq(p, c) = base[c] + model.position_embedding(p, c);
  }
  return seq;
}

inline OracleResult oracle_generate(const Model& model, const ComputePolicy& policy, const PromptInput& prompt,
                                    std::size_t max_new, std::optional<std::size_t> eos_id = std::nullopt) {
  const LayerSchedule schedule = resolve_schedule(policy, model.config.n_layers);
  if (prompt.length() == 0) throw CapacityError("oracle: empty prompt");
  OracleResult out;
  while (out.tokens.size() < max_new) {
    if (!out.tokens.empty() && eos_id && out.tokens.back() == *eos_id) break;
    // The most recent token is the query; earlier generated tokens are context.
    const std::size_t fed = out.tokens.size();
    const std::span<const std::size_t> generated(out.tokens.data(), fed);
    const Matrix seq = embed_sequence(model, prompt, generated);
    const auto classes = classify_tokens(prompt, fed);
    ForwardResult f = oracle_forward(model, schedule, policy, classes, seq);
    out.tokens.push_back(argmax(f.logits));
    out.step_logits.push_back(std::move(f.logits));
    out.step_hidden.push_back(std::move(f.hidden));
  }
  return out;
}

}  // namespace skipformer::oracle
