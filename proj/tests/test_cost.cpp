#include <gtest/gtest.h>

#include "skipformer/cost.hpp"
#include "skipformer/runtime.hpp"
#include "support.hpp"

namespace skipformer {
namespace {

using testing::Gen;
using testing::make_prompt;
using testing::small_config;

TEST(LinearFlops, Examples) {
  EXPECT_EQ(linear_flops(4, 3, 1), 24u);
  EXPECT_EQ(linear_flops(64, 64, 0), 0u);
  EXPECT_EQ(linear_flops(16384, 4096, 1) + linear_flops(4096, 16384, 1), 268435456u);
  EXPECT_EQ(ffn_flops(4096, 16384), 268435456u);
}

TEST(AttentionFlops, Examples) {
  EXPECT_EQ(attention_flops(4, 1, 0), 8u * 16u);
  EXPECT_EQ(attention_flops(4, 1, 2), 160u);
  for (std::size_t ctx = 1; ctx < 20; ++ctx) {
    EXPECT_EQ(attention_flops(16, 2, 2 * ctx) - attention_flops(16, 2, ctx), 4u * 16u * ctx);
  }
}

ExecutionTrace run_trace(const Model& m, const ComputePolicy& pol, const PromptInput& p, std::size_t steps) {
  return generate(m, pol, p, steps).trace;
}

TEST(TraceFlops, OneTokenOneLayerDense) {
  const ModelConfig cfg = small_config(1, 8);
  const Model m = synth_model(cfg, 1);
  const FlopsReport r = trace_flops(run_trace(m, ComputePolicy::dense(), {Matrix(0, 0), {1}}, 0), cfg);
  EXPECT_EQ(r.total, attention_flops(8, 2, 1) + ffn_flops(8, 32));
  EXPECT_EQ(r.total, r.dense_total);
  EXPECT_EQ(r.reduction_ratio, 0.0);
  EXPECT_EQ(r.sequential_depth, 2u);
}

TEST(TraceFlops, SkipEveryOtherBlockHalvesBlockWork) {
  for (std::size_t n : {2u, 4u, 6u, 8u}) {
    const ModelConfig cfg = small_config(n, 8);
    const Model m = synth_model(cfg, n);
    const FlopsReport r =
        trace_flops(run_trace(m, {PolicyMode::SkipBlock, 0, 2, TokenScope::all()}, make_prompt(cfg, 1), 8), cfg);
    EXPECT_EQ(2 * r.block_work, r.dense_block_work);
    EXPECT_EQ(r.block_work_reduction, 0.5);
  }
}

TEST(TraceFlops, ParallelFfnSaKeepsFlopsButCutsDepth) {
  const ModelConfig cfg = small_config(4, 8);
  const Model m = synth_model(cfg, 2);
  const PromptInput p = make_prompt(cfg, 2);
  const FlopsReport dense = trace_flops(run_trace(m, ComputePolicy::dense(), p, 6), cfg);
  const FlopsReport par = trace_flops(run_trace(m, {PolicyMode::ParallelFFNSA, 0, 2, TokenScope::all()}, p, 6), cfg);
  EXPECT_EQ(par.total, dense.total);
  EXPECT_LT(par.sequential_depth, dense.sequential_depth);
  for (std::size_t l : {0u, 2u}) EXPECT_EQ(par.per_layer_depth[l] * 2, dense.per_layer_depth[l]);
  for (std::size_t l : {1u, 3u}) EXPECT_EQ(par.per_layer_depth[l], dense.per_layer_depth[l]);
}

TEST(TraceFlops, ParallelBlocksKeepFlopsButHalveTokenDepth) {
  const ModelConfig cfg = small_config(4, 8);
  const Model m = synth_model(cfg, 3);
  const PromptInput p = make_prompt(cfg, 3);
  const FlopsReport dense = trace_flops(run_trace(m, ComputePolicy::dense(), p, 6), cfg);
  const FlopsReport par = trace_flops(run_trace(m, {PolicyMode::ParallelBlocks, 0, 2, TokenScope::all()}, p, 6), cfg);
  EXPECT_EQ(par.total, dense.total);
  EXPECT_EQ(par.token_depth, 4u);
  EXPECT_EQ(dense.token_depth, 8u);
}

TEST(TraceFlops, TotalsAreSumsOfParts) {
  const ModelConfig cfg = small_config(6, 16);
  const Model m = synth_model(cfg, 4);
  for (const ComputePolicy& pol : testing::policy_grid(1, 2)) {
    const FlopsReport r = trace_flops(run_trace(m, pol, make_prompt(cfg, 4), 5), cfg);
    Flops layers = 0, actions = 0;
    for (Flops f : r.per_layer) layers += f;
    for (Flops f : r.per_action) actions += f;
    ASSERT_EQ(layers, r.total);
    ASSERT_EQ(actions, r.total);
    ASSERT_EQ(r.prefill_total + r.decode_total, r.total);
    ASSERT_GE(r.reduction_ratio, 0.0);
    ASSERT_LE(r.reduction_ratio, 1.0);
  }
}

TEST(TraceFlops, IncompleteTraceIsRejected) {
  const ModelConfig cfg = small_config(3, 8);
  const Model m = synth_model(cfg, 5);
  ExecutionTrace t = run_trace(m, ComputePolicy::dense(), make_prompt(cfg, 5), 2);
  ExecutionTrace missing = t;
  missing.rows.pop_back();
  EXPECT_THROW(trace_flops(missing, cfg), TraceError);
  ExecutionTrace swapped = t;
  std::swap(swapped.rows[0], swapped.rows[1]);
  EXPECT_THROW(trace_flops(swapped, cfg), TraceError);
  ExecutionTrace unpaired = t;
  unpaired.rows[0].action = ActionKind::ParallelLead;
  EXPECT_THROW(trace_flops(unpaired, cfg), TraceError);
  EXPECT_THROW(trace_flops(t, small_config(4, 8)), TraceError);
}

TEST(PredictFlops, DenseTwoLayersFourPromptTokensClosedForm) {
  const ModelConfig cfg = small_config(2, 8);
  const LayerSchedule s = resolve_schedule(ComputePolicy::dense(), 2);
  const FlopsReport r = predict_flops(s, ComputePolicy::dense(), cfg, 0, 4, 0);
  const Flops d = 8, dff = 32;
  Flops want = 0;
  for (Flops ctx = 1; ctx <= 4; ++ctx) want += 2 * (8 * d * d + 4 * d * ctx + 4 * d * dff);
  EXPECT_EQ(r.total, want);
  EXPECT_EQ(r.dense_total, want);
}

TEST(PredictFlops, GeneratedOnlyWithoutGenerationEqualsDense) {
  const ModelConfig cfg = small_config(4, 8);
  for (PolicyMode mode : kAllModes) {
    const ComputePolicy pol{mode, 0, 2, TokenScope::generated_only()};
    const FlopsReport r = predict_flops(resolve_schedule(pol, 4), pol, cfg, 4, 3, 0);
    const FlopsReport d = predict_flops(resolve_schedule(ComputePolicy::dense(), 4), ComputePolicy::dense(), cfg, 4, 3, 0);
    EXPECT_EQ(r.total, d.total) << to_string(mode);
  }
}

TEST(PredictFlops, EqualsTraceFlopsEverywhere) {
  Gen g(301);
  for (int trial = 0; trial < 80; ++trial) {
    const ModelConfig cfg = small_config(g.index(1, 8), g.coin() ? 8 : 16);
    const Model m = synth_model(cfg, trial);
    const ComputePolicy pol = g.pick(testing::policy_grid(g.index(0, cfg.n_layers), g.index(2, 4)));
    const std::size_t np = g.index(0, 4), nt = g.index(1, 4), steps = g.index(0, 8);
    const PromptInput p = make_prompt(cfg, trial, np, nt);
    const GenerationResult r = generate(m, pol, p, steps);
    const std::size_t n_generated = steps == 0 ? 0 : steps - 1;
    ASSERT_EQ(predict_flops(resolve_schedule(pol, cfg.n_layers), pol, cfg, np, nt, n_generated),
              trace_flops(r.trace, cfg))
        << "trial " << trial;
  }
}

TEST(PredictFlops, AddingATokenNeverLowersTheTotal) {
  Gen g(302);
  for (int trial = 0; trial < 50; ++trial) {
    const ModelConfig cfg = small_config(g.index(1, 8), 8);
    const ComputePolicy pol = g.pick(testing::policy_grid(g.index(0, cfg.n_layers), g.index(2, 3)));
    const LayerSchedule s = resolve_schedule(pol, cfg.n_layers);
    Flops prev = 0;
    for (std::size_t gen = 0; gen < 10; ++gen) {
      const Flops t = predict_flops(s, pol, cfg, 2, 2, gen).total;
      ASSERT_GE(t, prev);
      prev = t;
    }
  }
}

TEST(PredictFlops, SkipBlockRatioTracksSkippedFraction) {
  // With every token in scope, a skipped layer holds no entries, so the FLOPs
  // ratio equals the skipped fraction exactly once context terms are counted
  // per layer.
  const ModelConfig cfg = small_config(8, 16);
  for (std::size_t interval = 1; interval <= 4; ++interval) {
    const ComputePolicy pol{PolicyMode::SkipBlock, 0, interval, TokenScope::all()};
    const LayerSchedule s = resolve_schedule(pol, 8);
    const FlopsReport r = predict_flops(s, pol, cfg, 4, 3, 8);
    EXPECT_DOUBLE_EQ(r.reduction_ratio, skipped_fraction(s));
    EXPECT_DOUBLE_EQ(r.block_work_reduction, skipped_fraction(s));
  }
}

}  // namespace
}  // namespace skipformer
