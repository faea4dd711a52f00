#pragma once

// Static compute policies and their per-layer schedules.
//
// A policy affects the layers A = { l : sl <= l < N, (l - sl) % I == 0 }.
// Skip and parallel-FFN+SA modes apply their action on A; ParallelBlocks
// fuses each l in A with l + 1. Tokens outside the policy scope always run
// the plain block.

#include <cstddef>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "skipformer/error.hpp"

namespace skipformer {

enum class TokenClass { Perceptual, Text, Generated };

inline const char* to_string(TokenClass c) {
  switch (c) {
    case TokenClass::Perceptual: return "perceptual";
    case TokenClass::Text: return "text";
    case TokenClass::Generated: return "generated";
  }
  return "?";
}

// Non-empty set of token classes.
class TokenScope {
 public:
  TokenScope(std::initializer_list<TokenClass> classes) {
    for (TokenClass c : classes) bits_ |= bit(c);
    if (bits_ == 0) throw PolicyError("token scope must not be empty");
  }

  static TokenScope generated_only() { return {TokenClass::Generated}; }
  static TokenScope all() { return {TokenClass::Perceptual, TokenClass::Text, TokenClass::Generated}; }

  bool contains(TokenClass c) const { return (bits_ & bit(c)) != 0; }
  bool operator==(const TokenScope&) const = default;

 private:
  static unsigned bit(TokenClass c) { return 1u << static_cast<unsigned>(c); }
  unsigned bits_ = 0;
};

enum class PolicyMode { Dense, SkipBlock, SkipFFN, SkipSA, ParallelFFNSA, ParallelBlocks };

inline constexpr PolicyMode kAllModes[] = {PolicyMode::Dense,  PolicyMode::SkipBlock,     PolicyMode::SkipFFN,
                                           PolicyMode::SkipSA, PolicyMode::ParallelFFNSA, PolicyMode::ParallelBlocks};

inline const char* to_string(PolicyMode m) {
  switch (m) {
    case PolicyMode::Dense: return "dense";
    case PolicyMode::SkipBlock: return "skip_block";
    case PolicyMode::SkipFFN: return "skip_ffn";
    case PolicyMode::SkipSA: return "skip_sa";
    case PolicyMode::ParallelFFNSA: return "parallel_ffn_sa";
    case PolicyMode::ParallelBlocks: return "parallel_blocks";
  }
  return "?";
}

inline PolicyMode parse_mode(std::string_view s) {
  for (PolicyMode m : kAllModes)
    if (s == to_string(m)) return m;
  throw PolicyError("unknown policy mode '" + std::string(s) + "'");
}

struct ComputePolicy {
  PolicyMode mode = PolicyMode::Dense;
  std::size_t start_layer = 0;
  std::size_t interval = 1;
  TokenScope scope = TokenScope::generated_only();

  static ComputePolicy dense() { return {}; }

  void validate(std::size_t n_layers) const {
    if (mode == PolicyMode::Dense) return;
    if (interval < 1) throw PolicyError("interval must be >= 1");
    if (start_layer > n_layers) {
      throw PolicyError("start_layer " + std::to_string(start_layer) + " exceeds n_layers " +
                        std::to_string(n_layers));
    }
    if (mode == PolicyMode::ParallelBlocks && interval < 2) {
      throw PolicyError("parallel_blocks requires interval >= 2");
    }
  }
};

enum class ActionKind { Execute, SkipBlock, SkipFFN, SkipSA, ParallelFFNSA, ParallelLead, ParallelAbsorbed };

inline const char* to_string(ActionKind a) {
  switch (a) {
    case ActionKind::Execute: return "EXECUTE";
    case ActionKind::SkipBlock: return "SKIP";
    case ActionKind::SkipFFN: return "SKIP_FFN";
    case ActionKind::SkipSA: return "SKIP_SA";
    case ActionKind::ParallelFFNSA: return "PARALLEL_FFN_SA";
    case ActionKind::ParallelLead: return "PARALLEL_LEAD";
    case ActionKind::ParallelAbsorbed: return "PARALLEL_ABSORBED";
  }
  return "?";
}

struct LayerAction {
  ActionKind kind = ActionKind::Execute;
  std::size_t partner = 0;  // meaningful for ParallelLead only

  static LayerAction execute() { return {}; }

  bool operator==(const LayerAction&) const = default;
};

// Whether the token's self-attention for this layer runs (and so writes K/V
// there). An absorbed layer's attention runs inside its lead.
inline bool writes_kv(ActionKind a) {
  return a != ActionKind::SkipBlock && a != ActionKind::SkipSA;
}

struct LayerSchedule {
  std::size_t n_layers = 0;
  std::vector<LayerAction> in_scope;  // out-of-scope tokens always Execute

  bool operator==(const LayerSchedule&) const = default;
};

inline LayerSchedule resolve_schedule(const ComputePolicy& policy, std::size_t n_layers) {
  if (n_layers < 1) throw PolicyError("n_layers must be >= 1");
  policy.validate(n_layers);
  LayerSchedule s{n_layers, std::vector<LayerAction>(n_layers)};
  if (policy.mode == PolicyMode::Dense) return s;

  for (std::size_t l = policy.start_layer; l < n_layers; l += policy.interval) {
    switch (policy.mode) {
      case PolicyMode::SkipBlock: s.in_scope[l].kind = ActionKind::SkipBlock; break;
      case PolicyMode::SkipFFN: s.in_scope[l].kind = ActionKind::SkipFFN; break;
      case PolicyMode::SkipSA: s.in_scope[l].kind = ActionKind::SkipSA; break;
      case PolicyMode::ParallelFFNSA: s.in_scope[l].kind = ActionKind::ParallelFFNSA; break;
      case PolicyMode::ParallelBlocks:
        // interval >= 2, so l + 1 is never itself in A; a dangling last layer stays Execute.
        if (l + 1 < n_layers) {
          s.in_scope[l] = {ActionKind::ParallelLead, l + 1};
          s.in_scope[l + 1].kind = ActionKind::ParallelAbsorbed;
        }
        break;
      case PolicyMode::Dense: break;
    }
  }
  return s;
}

inline LayerAction action_for(const LayerSchedule& schedule, std::size_t layer, TokenClass token_class,
                              const TokenScope& scope) {
  if (layer >= schedule.n_layers) throw RangeError("layer " + std::to_string(layer) + " out of range");
  if (!scope.contains(token_class)) return LayerAction::execute();
  return schedule.in_scope[layer];
}

// Fraction of blocks (SkipBlock) or of FFN / SA sub-layers (SkipFFN / SkipSA)
// that are skipped. Parallel modes skip nothing.
inline double skipped_fraction(const LayerSchedule& schedule) {
  std::size_t skipped = 0;
  for (const LayerAction& a : schedule.in_scope) {
    if (a.kind == ActionKind::SkipBlock || a.kind == ActionKind::SkipFFN || a.kind == ActionKind::SkipSA) ++skipped;
  }
  return static_cast<double>(skipped) / static_cast<double>(schedule.n_layers);
}

}  // namespace skipformer
