#pragma once

// FLOPs accounting. Convention: one multiply-add = 2 FLOPs; softmax, layer
// norms, activations and bias adds are not counted.
//
// Two independent routes produce a FlopsReport: trace_flops sums what the
// runtime recorded, predict_flops replays the schedule and derives the ragged
// context sizes itself. They must agree exactly.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/model.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/runtime.hpp"

namespace skipformer {

using Flops = std::uint64_t;

inline constexpr Flops linear_flops(std::size_t out_dim, std::size_t in_dim, std::size_t tokens) {
  return Flops{2} * out_dim * in_dim * tokens;
}

// Per query token: Q/K/V projections, scores, weighted sum, output projection.
// Independent of the head count.
inline constexpr Flops attention_flops(std::size_t d_model, std::size_t /*n_heads*/, std::size_t ctx_entries) {
  return 3 * linear_flops(d_model, d_model, 1) + Flops{2} * d_model * ctx_entries +
         Flops{2} * d_model * ctx_entries + linear_flops(d_model, d_model, 1);
}

inline constexpr Flops ffn_flops(std::size_t d_model, std::size_t d_ff) {
  return linear_flops(d_ff, d_model, 1) + linear_flops(d_model, d_ff, 1);
}

// Dependent sub-layer stages on one token's path through a layer.
inline constexpr std::size_t action_stages(ActionKind a) {
  switch (a) {
    case ActionKind::Execute: return 2;
    case ActionKind::SkipBlock: return 0;
    case ActionKind::SkipFFN: return 1;
    case ActionKind::SkipSA: return 1;
    case ActionKind::ParallelFFNSA: return 1;
    case ActionKind::ParallelLead: return 2;  // two blocks side by side, each SA then FFN
    case ActionKind::ParallelAbsorbed: return 0;
  }
  return 0;
}

inline constexpr std::size_t kActionKinds = 7;

struct FlopsReport {
  std::vector<Flops> per_layer;
  std::array<Flops, kActionKinds> per_action{};
  Flops prefill_total = 0;
  Flops decode_total = 0;
  Flops total = 0;
  Flops dense_total = 0;
  double reduction_ratio = 0.0;
  // Projection + FFN work only, without the context-dependent score terms.
  Flops block_work = 0;
  Flops dense_block_work = 0;
  double block_work_reduction = 0.0;
  // Stage counts summed over all processed tokens, and per layer.
  std::size_t sequential_depth = 0;
  std::size_t dense_depth = 0;
  std::vector<std::size_t> per_layer_depth;
  // Stages on one generated token's critical path.
  std::size_t token_depth = 0;
  std::size_t n_tokens = 0;

  bool operator==(const FlopsReport&) const = default;
};

namespace detail {

struct ActionCost {
  Flops own = 0;      // attributed to the action's layer
  Flops partner = 0;  // ParallelLead: the fused partner block
  Flops work = 0;     // context-free part of own + partner
};

inline ActionCost action_cost(ActionKind a, std::size_t ctx, std::size_t partner_ctx, const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  const Flops sa = attention_flops(d, cfg.n_heads, ctx);
  const Flops f = ffn_flops(d, cfg.d_ff);
  const Flops proj = attention_flops(d, cfg.n_heads, 0);
  switch (a) {
    case ActionKind::Execute:
    case ActionKind::ParallelFFNSA: return {sa + f, 0, proj + f};
    case ActionKind::SkipBlock:
    case ActionKind::ParallelAbsorbed: return {};
    case ActionKind::SkipFFN: return {sa, 0, proj};
    case ActionKind::SkipSA: return {f, 0, f};
    case ActionKind::ParallelLead:
      return {sa + f, attention_flops(d, cfg.n_heads, partner_ctx) + f, 2 * (proj + f)};
  }
  return {};
}

class ReportBuilder {
 public:
  explicit ReportBuilder(const ModelConfig& cfg) : cfg_(cfg) {
    report_.per_layer.assign(cfg.n_layers, 0);
    report_.per_layer_depth.assign(cfg.n_layers, 0);
  }

  void add(std::size_t layer, TokenClass cls, ActionKind a, std::size_t ctx, std::size_t partner_ctx) {
    const ActionCost c = action_cost(a, ctx, partner_ctx, cfg_);
    report_.per_layer[layer] += c.own;
    if (c.partner != 0) report_.per_layer[layer + 1] += c.partner;
    const Flops both = c.own + c.partner;
    report_.per_action[static_cast<std::size_t>(a)] += both;
    (cls == TokenClass::Generated ? report_.decode_total : report_.prefill_total) += both;
    report_.block_work += c.work;
    report_.per_layer_depth[layer] += action_stages(a);
    report_.sequential_depth += action_stages(a);
  }

  FlopsReport finish(std::size_t n_tokens, std::size_t token_depth) {
    const std::size_t d = cfg_.d_model;
    const Flops f = ffn_flops(d, cfg_.d_ff);
    for (std::size_t p = 0; p < n_tokens; ++p) {
      report_.dense_total += cfg_.n_layers * (attention_flops(d, cfg_.n_heads, p + 1) + f);
    }
    report_.dense_block_work = n_tokens * cfg_.n_layers * (attention_flops(d, cfg_.n_heads, 0) + f);
    report_.total = report_.prefill_total + report_.decode_total;
    report_.dense_depth = 2 * cfg_.n_layers * n_tokens;
    report_.n_tokens = n_tokens;
    report_.token_depth = token_depth;
    report_.reduction_ratio = ratio(report_.total, report_.dense_total);
    report_.block_work_reduction = ratio(report_.block_work, report_.dense_block_work);
    return report_;
  }

 private:
  static double ratio(Flops part, Flops whole) {
    if (whole == 0) return 0.0;
    return 1.0 - static_cast<double>(part) / static_cast<double>(whole);
  }

  const ModelConfig& cfg_;
  FlopsReport report_;
};

}  // namespace detail

// Token depth in the result is the critical path of the last traced token.
inline FlopsReport trace_flops(const ExecutionTrace& trace, const ModelConfig& cfg) {
  const std::size_t n = cfg.n_layers;
  if (trace.n_layers != n) throw TraceError("trace depth " + std::to_string(trace.n_layers) + " != n_layers");
  if (trace.rows.size() % n != 0) throw TraceError("trace row count is not a multiple of n_layers");
  const std::size_t tokens = trace.rows.size() / n;

  detail::ReportBuilder builder(cfg);
  std::size_t last_depth = 0;
  for (std::size_t p = 0; p < tokens; ++p) {
    std::size_t depth = 0;
    for (std::size_t l = 0; l < n; ++l) {
      const TraceRow& row = trace.rows[p * n + l];
      if (row.position != p || row.layer != l) {
        throw TraceError("trace incomplete: expected (position " + std::to_string(p) + ", layer " +
                         std::to_string(l) + "), found (" + std::to_string(row.position) + ", " +
                         std::to_string(row.layer) + ")");
      }
      if (row.action == ActionKind::ParallelLead &&
          (l + 1 >= n || trace.rows[p * n + l + 1].action != ActionKind::ParallelAbsorbed)) {
        throw TraceError("trace: parallel lead at layer " + std::to_string(l) + " without absorbed partner");
      }
      builder.add(l, row.token_class, row.action, row.context, row.partner_context);
      depth += action_stages(row.action);
    }
    last_depth = depth;
  }
  return builder.finish(tokens, last_depth);
}

// Replays the schedule over the given token classes, tracking how many K/V
// entries each layer holds to size every attention context.
inline FlopsReport predict_flops(const LayerSchedule& schedule, const ComputePolicy& policy, const ModelConfig& cfg,
                                 std::span<const TokenClass> classes) {
  const std::size_t n = cfg.n_layers;
  if (schedule.n_layers != n) throw PolicyError("schedule does not match model depth");
  detail::ReportBuilder builder(cfg);
  std::vector<std::size_t> written(n, 0);
  std::size_t last_depth = 0;
  for (TokenClass cls : classes) {
    std::size_t depth = 0;
    for (std::size_t l = 0; l < n; ++l) {
      const LayerAction a = action_for(schedule, l, cls, policy.scope);
      depth += action_stages(a.kind);
      if (a.kind == ActionKind::ParallelLead) {
        builder.add(l, cls, a.kind, written[l] + 1, written[l + 1] + 1);
        builder.add(l + 1, cls, ActionKind::ParallelAbsorbed, written[l + 1] + 1, 0);
        ++written[l];
        ++written[l + 1];
        ++l;
        continue;
      }
      const bool attends = writes_kv(a.kind);
      builder.add(l, cls, a.kind, attends ? written[l] + 1 : 0, 0);
      if (attends) ++written[l];
    }
    last_depth = depth;
  }
  return builder.finish(classes.size(), last_depth);
}

inline FlopsReport predict_flops(const LayerSchedule& schedule, const ComputePolicy& policy, const ModelConfig& cfg,
                                 std::size_t n_perceptual, std::size_t n_text, std::size_t n_generated) {
  std::vector<TokenClass> classes;
  classes.insert(classes.end(), n_perceptual, TokenClass::Perceptual);
  classes.insert(classes.end(), n_text, TokenClass::Text);
  classes.insert(classes.end(), n_generated, TokenClass::Generated);
  return predict_flops(schedule, policy, cfg, classes);
}

}  // namespace skipformer
