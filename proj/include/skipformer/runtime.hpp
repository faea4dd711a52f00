#pragma once

// Incremental generation over a ragged KV cache.
//
// Tokens run one at a time through the whole stack. At each layer the token
// takes action_for(schedule, layer, class, scope). Only actions that execute
// self-attention append a K/V entry, so layers end up holding different
// subsets of positions. A token that attends always appends its own entry
// first, so attention never sees an empty context.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/model.hpp"
#include "skipformer/numerics.hpp"
#include "skipformer/policy.hpp"

namespace skipformer {

struct PromptInput {
  Matrix perceptual;  // n_P x d_model, possibly 0 rows
  std::vector<std::size_t> text_ids;

  std::size_t length() const { return perceptual.rows + text_ids.size(); }
};

// Prompt classes followed by n_generated Generated entries.
inline std::vector<TokenClass> classify_tokens(const PromptInput& prompt, std::size_t n_generated = 0) {
  std::vector<TokenClass> classes;
  classes.reserve(prompt.length() + n_generated);
  classes.insert(classes.end(), prompt.perceptual.rows, TokenClass::Perceptual);
  classes.insert(classes.end(), prompt.text_ids.size(), TokenClass::Text);
  classes.insert(classes.end(), n_generated, TokenClass::Generated);
  return classes;
}

class RaggedKvCache {
 public:
  RaggedKvCache() = default;
  explicit RaggedKvCache(std::size_t n_layers) : layers_(n_layers) {}

  std::size_t n_layers() const { return layers_.size(); }

  std::span<const KvEntry> layer(std::size_t l) const { return layers_.at(l); }

  void append(std::size_t l, KvEntry e) {
    auto& entries = layers_.at(l);
    if (!entries.empty() && entries.back().position >= e.position) {
      throw InternalError("kv cache layer " + std::to_string(l) + ": position " + std::to_string(e.position) +
                          " not after " + std::to_string(entries.back().position));
    }
    entries.push_back(std::move(e));
  }

  bool has_entry(std::size_t l, std::size_t position) const {
    for (const KvEntry& e : layers_.at(l))
      if (e.position == position) return true;
    return false;
  }

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& entries : layers_) n += entries.size();
    return n;
  }

  // Test hook for fault injection.
  std::vector<KvEntry>& mutable_layer(std::size_t l) { return layers_.at(l); }

  bool operator==(const RaggedKvCache&) const = default;

 private:
  std::vector<std::vector<KvEntry>> layers_;
};

struct TraceRow {
  std::size_t position = 0;
  std::size_t layer = 0;
  TokenClass token_class = TokenClass::Text;
  ActionKind action = ActionKind::Execute;
  std::size_t context = 0;          // entries attended at this layer, 0 when SA did not run
  std::size_t partner_context = 0;  // ParallelLead: entries attended by the partner block

  bool operator==(const TraceRow&) const = default;
};

struct ExecutionTrace {
  std::size_t n_layers = 0;
  std::vector<TraceRow> rows;

  bool operator==(const ExecutionTrace&) const = default;
};

// Observer of linear-map inputs, with the token and layer that produced them.
using ActivationObserver =
    std::function<void(std::size_t position, TokenClass, std::size_t layer, LinearSlot, std::span<const float>)>;

struct RunHooks {
  ActivationObserver observer;
  std::function<void(RaggedKvCache&)> after_prefill;  // fault injection in tests and `compare`
  bool retain_hidden = false;
};

// Hidden state of one token entering each layer plus the stack output
// (n_layers + 1 vectors). A fused pair reports its output at both layers.
using LayerHidden = std::vector<Vector>;

struct TokenRun {
  Vector hidden;  // before final LN
  std::vector<TraceRow> rows;
  LayerHidden layer_hidden;
};

namespace detail {

inline TokenRun run_token(const Model& model, const LayerSchedule& schedule, const TokenScope& scope,
                          RaggedKvCache& cache, Vector x, std::size_t position, TokenClass cls,
                          const RunHooks& hooks) {
  const ModelConfig& cfg = model.config;
  const std::size_t n = cfg.n_layers;
  TokenRun run;
  run.rows.reserve(n);
  if (hooks.retain_hidden) {
    run.layer_hidden.assign(n + 1, {});
    run.layer_hidden[0] = x;
  }

  auto tap_for = [&](std::size_t layer) -> LinearTap {
    if (!hooks.observer) return {};
    return [&hooks, position, cls, layer](LinearSlot slot, std::span<const float> in) {
      hooks.observer(position, cls, layer, slot, in);
    };
  };
  auto context_at = [&](std::size_t layer) { return AttentionContext{cache.layer(layer), nullptr, position}; };

  for (std::size_t l = 0; l < n; ++l) {
    const LayerAction action = action_for(schedule, l, cls, scope);
    const BlockWeights& block = model.blocks[l];
    TraceRow row{position, l, cls, action.kind, 0, 0};
    std::optional<KvEntry> write;

    switch (action.kind) {
      case ActionKind::Execute: {
        row.context = cache.layer(l).size() + 1;
        auto out = block_standard(block, x, context_at(l), cfg, tap_for(l));
        x = std::move(out.x_out);
        write = std::move(out.kv_write);
        break;
      }
      case ActionKind::SkipBlock: break;
      case ActionKind::SkipFFN: {
        row.context = cache.layer(l).size() + 1;
        auto out = block_skip_ffn(block, x, context_at(l), cfg, tap_for(l));
        x = std::move(out.x_out);
        write = std::move(out.kv_write);
        break;
      }
      case ActionKind::SkipSA: {
        auto out = block_skip_sa(block, x, cfg, tap_for(l));
        x = std::move(out.x_out);
        break;
      }
      case ActionKind::ParallelFFNSA: {
        row.context = cache.layer(l).size() + 1;
        auto out = block_parallel_ffn_sa(block, x, context_at(l), cfg, tap_for(l));
        x = std::move(out.x_out);
        write = std::move(out.kv_write);
        break;
      }
      case ActionKind::ParallelLead: {
        const std::size_t p = action.partner;
        if (p != l + 1 || p >= n) throw InternalError("parallel lead at layer " + std::to_string(l) + " has bad partner");
        row.context = cache.layer(l).size() + 1;
        row.partner_context = cache.layer(p).size() + 1;
        // Both blocks read the same input.
        auto first = block_residual(block, x, context_at(l), cfg, tap_for(l));
        auto second = block_residual(model.blocks[p], x, context_at(p), cfg, tap_for(p));
        x = add(add(x, first.x_out), second.x_out);
        cache.append(l, std::move(*first.kv_write));
        cache.append(p, std::move(*second.kv_write));
        run.rows.push_back(row);
        run.rows.push_back(TraceRow{position, p, cls, ActionKind::ParallelAbsorbed, row.partner_context, 0});
        if (hooks.retain_hidden) run.layer_hidden[l + 1] = x;
        ++l;
        if (hooks.retain_hidden) run.layer_hidden[l + 1] = x;
        continue;
      }
      case ActionKind::ParallelAbsorbed:
        throw InternalError("absorbed layer " + std::to_string(l) + " reached without its lead");
    }

    if (write) cache.append(l, std::move(*write));
    run.rows.push_back(row);
    if (hooks.retain_hidden) run.layer_hidden[l + 1] = x;
  }
  run.hidden = std::move(x);
  return run;
}

inline void check_prompt(const Model& model, const PromptInput& prompt) {
  if (prompt.length() == 0) throw CapacityError("prompt must contain at least one token");
  if (prompt.perceptual.rows > 0 && prompt.perceptual.cols != model.config.d_model) {
    throw ShapeError("perceptual embedding dim " + std::to_string(prompt.perceptual.cols) + " != d_model " +
                     std::to_string(model.config.d_model));
  }
  if (prompt.length() > model.config.max_positions) {
    throw CapacityError("prompt length " + std::to_string(prompt.length()) + " exceeds max_positions " +
                        std::to_string(model.config.max_positions));
  }
}

}  // namespace detail

struct PrefillResult {
  RaggedKvCache cache;
  Vector last_hidden;  // final prompt position, final LN not applied
  ExecutionTrace trace;
  std::vector<LayerHidden> hidden;  // per prompt position, when retained
};

inline PrefillResult prefill(const Model& model, const LayerSchedule& schedule, const ComputePolicy& policy,
                             const PromptInput& prompt, const RunHooks& hooks = {}) {
  detail::check_prompt(model, prompt);
  if (schedule.n_layers != model.config.n_layers) throw PolicyError("schedule does not match model depth");
  PrefillResult out{RaggedKvCache(model.config.n_layers), {}, {model.config.n_layers, {}}, {}};
  const auto classes = classify_tokens(prompt);
  for (std::size_t pos = 0; pos < classes.size(); ++pos) {
    Vector x = pos < prompt.perceptual.rows ? embed_vector(model, prompt.perceptual.row(pos), pos)
                                            : embed(model, prompt.text_ids[pos - prompt.perceptual.rows], pos);
    TokenRun run = detail::run_token(model, schedule, policy.scope, out.cache, std::move(x), pos, classes[pos], hooks);
    out.trace.rows.insert(out.trace.rows.end(), run.rows.begin(), run.rows.end());
    if (hooks.retain_hidden) out.hidden.push_back(std::move(run.layer_hidden));
    out.last_hidden = std::move(run.hidden);
  }
  return out;
}

struct DecodeResult {
  std::size_t token = 0;
  Vector logits;
  std::vector<TraceRow> trace_rows;
  LayerHidden hidden;  // when retained
};

// Feeds prev_token as a Generated token at `position` and predicts the next one.
inline DecodeResult decode_step(const Model& model, const LayerSchedule& schedule, const ComputePolicy& policy,
                                RaggedKvCache& cache, std::size_t position, std::size_t prev_token,
                                const RunHooks& hooks = {}) {
  if (position >= model.config.max_positions) {
    throw CapacityError("decode position " + std::to_string(position) + " exceeds max_positions " +
                        std::to_string(model.config.max_positions));
  }
  Vector x = embed(model, prev_token, position);
  TokenRun run =
      detail::run_token(model, schedule, policy.scope, cache, std::move(x), position, TokenClass::Generated, hooks);
  DecodeResult out;
  out.logits = unembed(model, run.hidden);
  out.token = argmax(out.logits);
  out.trace_rows = std::move(run.rows);
  out.hidden = std::move(run.layer_hidden);
  return out;
}

struct GenerationResult {
  std::vector<std::size_t> tokens;
  std::vector<Vector> step_logits;  // one per emitted token
  ExecutionTrace trace;
  RaggedKvCache cache;
  std::vector<LayerHidden> hidden;  // per processed position, when retained
  std::size_t n_prompt = 0;
};

inline GenerationResult generate(const Model& model, const ComputePolicy& policy, const PromptInput& prompt,
                                 std::size_t max_new_tokens, std::optional<std::size_t> eos_id = std::nullopt,
                                 const RunHooks& hooks = {}) {
  const LayerSchedule schedule = resolve_schedule(policy, model.config.n_layers);
  detail::check_prompt(model, prompt);
  if (prompt.length() + max_new_tokens > model.config.max_positions) {
    throw CapacityError("prompt length " + std::to_string(prompt.length()) + " + max_new_tokens " +
                        std::to_string(max_new_tokens) + " exceeds max_positions " +
                        std::to_string(model.config.max_positions));
  }

  PrefillResult pf = prefill(model, schedule, policy, prompt, hooks);
  if (hooks.after_prefill) hooks.after_prefill(pf.cache);

  GenerationResult out;
  out.n_prompt = prompt.length();
  out.trace = std::move(pf.trace);
  out.hidden = std::move(pf.hidden);
  if (max_new_tokens > 0) {
    Vector logits = unembed(model, pf.last_hidden);
    out.tokens.push_back(argmax(logits));
    out.step_logits.push_back(std::move(logits));
  }
  std::size_t position = prompt.length();
  while (out.tokens.size() < max_new_tokens && !(eos_id && out.tokens.back() == *eos_id)) {
    DecodeResult step = decode_step(model, schedule, policy, pf.cache, position++, out.tokens.back(), hooks);
    out.trace.rows.insert(out.trace.rows.end(), step.trace_rows.begin(), step.trace_rows.end());
    if (hooks.retain_hidden) out.hidden.push_back(std::move(step.hidden));
    out.tokens.push_back(step.token);
    out.step_logits.push_back(std::move(step.logits));
  }
  out.cache = std::move(pf.cache);
  return out;
}

}  // namespace skipformer
