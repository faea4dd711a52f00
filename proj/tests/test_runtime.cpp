#include <gtest/gtest.h>

#include "skipformer/oracle.hpp"
#include "skipformer/runtime.hpp"
#include "support.hpp"

namespace skipformer {
namespace {

using testing::Gen;
using testing::make_prompt;
using testing::small_config;

PromptInput text_prompt(std::vector<std::size_t> ids) { return {Matrix(0, 0), std::move(ids)}; }

TEST(ClassifyTokens, PerceptualThenText) {
  PromptInput p{Matrix(10, 8), {1, 2, 3}};
  std::vector<TokenClass> want(10, TokenClass::Perceptual);
  want.insert(want.end(), 3, TokenClass::Text);
  EXPECT_EQ(classify_tokens(p), want);
}

TEST(ClassifyTokens, SingleBos) { EXPECT_EQ(classify_tokens(text_prompt({0})), std::vector{TokenClass::Text}); }

TEST(ClassifyTokens, GeneratedPositionsFollowThePrompt) {
  using enum TokenClass;
  EXPECT_EQ(classify_tokens({Matrix(2, 8), {4, 5}}, 2),
            (std::vector{Perceptual, Perceptual, Text, Text, Generated, Generated}));
}

TEST(Prefill, DenseWritesEveryPositionAtEveryLayer) {
  const ModelConfig cfg = small_config(4, 8);
  const Model m = synth_model(cfg, 1);
  const PromptInput p = make_prompt(cfg, 1);
  const PrefillResult r = prefill(m, resolve_schedule(ComputePolicy::dense(), 4), ComputePolicy::dense(), p);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(r.cache.layer(l).size(), p.length());
  EXPECT_EQ(r.trace.rows.size(), 4 * p.length());
}

TEST(Prefill, SkippedLayerHasNoEntriesUnderFullScope) {
  const ModelConfig cfg = small_config(4, 8);
  const Model m = synth_model(cfg, 2);
  const ComputePolicy pol{PolicyMode::SkipBlock, 0, 2, TokenScope::all()};
  const PrefillResult r = prefill(m, resolve_schedule(pol, 4), pol, make_prompt(cfg, 2));
  EXPECT_EQ(r.cache.layer(0).size(), 0u);
  EXPECT_EQ(r.cache.layer(2).size(), 0u);
  EXPECT_EQ(r.cache.layer(1).size(), 7u);
  EXPECT_EQ(r.cache.layer(3).size(), 7u);
}

TEST(Prefill, GeneratedOnlyScopeLeavesPrefillUntouched) {
  const ModelConfig cfg = small_config(6, 8);
  const Model m = synth_model(cfg, 3);
  const PromptInput p = make_prompt(cfg, 3);
  RunHooks hooks;
  hooks.retain_hidden = true;
  const PrefillResult dense = prefill(m, resolve_schedule(ComputePolicy::dense(), 6), ComputePolicy::dense(), p, hooks);
  for (const ComputePolicy& pol : testing::policy_grid()) {
    if (!(pol.scope == TokenScope::generated_only())) continue;
    const PrefillResult r = prefill(m, resolve_schedule(pol, 6), pol, p, hooks);
    EXPECT_EQ(r.cache, dense.cache) << to_string(pol.mode);
    EXPECT_EQ(r.last_hidden, dense.last_hidden) << to_string(pol.mode);
    EXPECT_EQ(r.hidden, dense.hidden) << to_string(pol.mode);
  }
}

TEST(Prefill, RejectsBadPrompts) {
  const ModelConfig cfg = small_config(2, 8);
  const Model m = synth_model(cfg, 4);
  const LayerSchedule s = resolve_schedule(ComputePolicy::dense(), 2);
  EXPECT_THROW(prefill(m, s, ComputePolicy::dense(), PromptInput{}), CapacityError);
  EXPECT_THROW(prefill(m, s, ComputePolicy::dense(), PromptInput{Matrix(2, 4), {}}), ShapeError);
  EXPECT_THROW(prefill(m, s, ComputePolicy::dense(), text_prompt(std::vector<std::size_t>(33, 1))), CapacityError);
  EXPECT_THROW(prefill(m, s, ComputePolicy::dense(), text_prompt({99})), RangeError);
}

TEST(DecodeStep, OneLayerDenseMatchesOracle) {
  const ModelConfig cfg = small_config(1, 8);
  const Model m = synth_model(cfg, 5);
  const PromptInput p = text_prompt({3, 1, 4});
  const ComputePolicy pol = ComputePolicy::dense();
  const LayerSchedule s = resolve_schedule(pol, 1);
  PrefillResult pf = prefill(m, s, pol, p);
  const DecodeResult step = decode_step(m, s, pol, pf.cache, 3, 9);

  PromptInput full = text_prompt({3, 1, 4, 9});
  const auto classes = classify_tokens(full);
  const oracle::ForwardResult ref =
      oracle::oracle_forward(m, s, pol, classes, oracle::embed_sequence(m, full, {}));
  EXPECT_EQ(step.token, argmax(ref.logits));
  EXPECT_LE(max_abs_diff(step.logits, ref.logits), 1e-5f);
}

TEST(DecodeStep, SkippingTheOnlyLayerLeavesTheEmbedding) {
  const ModelConfig cfg = small_config(1, 8);
  const Model m = synth_model(cfg, 6);
  const ComputePolicy pol{PolicyMode::SkipBlock, 0, 1, TokenScope::all()};
  const LayerSchedule s = resolve_schedule(pol, 1);
  PrefillResult pf = prefill(m, s, pol, text_prompt({1, 2}));
  const DecodeResult step = decode_step(m, s, pol, pf.cache, 2, 7);
  EXPECT_EQ(step.logits, unembed(m, embed(m, 7, 2)));
}

TEST(DecodeStep, TiesResolveToTheLowerId) {
  const ModelConfig cfg = small_config(1, 8);
  Model m = synth_model(cfg, 7);
  m.final_ln_gamma = Vector(8, 0.0f);
  m.final_ln_beta = Vector(8, 1.0f);
  m.unembedding = Matrix(8, cfg.vocab_size);
  for (std::size_t r = 0; r < 8; ++r) m.unembedding(r, 3) = m.unembedding(r, 7) = 1.0f;
  const ComputePolicy pol = ComputePolicy::dense();
  const LayerSchedule s = resolve_schedule(pol, 1);
  PrefillResult pf = prefill(m, s, pol, text_prompt({1}));
  const DecodeResult step = decode_step(m, s, pol, pf.cache, 1, 5);
  ASSERT_EQ(step.logits[3], step.logits[7]);
  EXPECT_EQ(step.token, 3u);
}

TEST(DecodeStep, PositionBeyondCapacityThrows) {
  const ModelConfig cfg = small_config(1, 8);
  const Model m = synth_model(cfg, 8);
  const LayerSchedule s = resolve_schedule(ComputePolicy::dense(), 1);
  RaggedKvCache cache(1);
  EXPECT_THROW(decode_step(m, s, ComputePolicy::dense(), cache, 32, 1), CapacityError);
}

TEST(Generate, ZeroNewTokensTracesThePromptOnly) {
  const ModelConfig cfg = small_config(3, 8);
  const Model m = synth_model(cfg, 9);
  const PromptInput p = make_prompt(cfg, 9);
  const GenerationResult r = generate(m, ComputePolicy::dense(), p, 0);
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_TRUE(r.step_logits.empty());
  EXPECT_EQ(r.trace.rows.size(), 3 * p.length());
}

TEST(Generate, StartAtDepthMatchesDenseBitwise) {
  const ModelConfig cfg = small_config(4, 16);
  const Model m = synth_model(cfg, 10);
  const PromptInput p = make_prompt(cfg, 10);
  const GenerationResult dense = generate(m, ComputePolicy::dense(), p, 8);
  const GenerationResult skip = generate(m, {PolicyMode::SkipBlock, 4, 2, TokenScope::all()}, p, 8);
  EXPECT_EQ(skip.tokens, dense.tokens);
  EXPECT_EQ(skip.step_logits, dense.step_logits);
}

TEST(Generate, DenseMatchesOracleTokens) {
  const ModelConfig cfg = small_config(4, 8);
  const Model m = synth_model(cfg, 11);
  const PromptInput p = make_prompt(cfg, 11);
  EXPECT_EQ(generate(m, ComputePolicy::dense(), p, 8).tokens,
            oracle::oracle_generate(m, ComputePolicy::dense(), p, 8).tokens);
}

TEST(Generate, StopsAfterEos) {
  const ModelConfig cfg = small_config(2, 8);
  const Model m = synth_model(cfg, 12);
  const PromptInput p = make_prompt(cfg, 12);
  const GenerationResult free_run = generate(m, ComputePolicy::dense(), p, 8);
  const std::size_t eos = free_run.tokens[2];
  const GenerationResult r = generate(m, ComputePolicy::dense(), p, 8, eos);
  const auto first = std::find(free_run.tokens.begin(), free_run.tokens.end(), eos);
  EXPECT_EQ(r.tokens, std::vector<std::size_t>(free_run.tokens.begin(), first + 1));
}

TEST(Generate, CapacityIsCheckedUpFront) {
  const ModelConfig cfg = small_config(2, 8);
  const Model m = synth_model(cfg, 13);
  EXPECT_THROW(generate(m, ComputePolicy::dense(), make_prompt(cfg, 13), 26), CapacityError);
  EXPECT_NO_THROW(generate(m, ComputePolicy::dense(), make_prompt(cfg, 13), 25));
}

TEST(Generate, InvalidPolicyIsRejected) {
  const ModelConfig cfg = small_config(2, 8);
  const Model m = synth_model(cfg, 14);
  EXPECT_THROW(generate(m, {PolicyMode::ParallelBlocks, 0, 1, TokenScope::all()}, make_prompt(cfg, 14), 2),
               PolicyError);
}

TEST(RaggedKvCache, PositionsMustIncrease) {
  RaggedKvCache cache(1);
  cache.append(0, {2, {}, {}});
  EXPECT_THROW(cache.append(0, {2, {}, {}}), InternalError);
  EXPECT_THROW(cache.append(0, {1, {}, {}}), InternalError);
  EXPECT_NO_THROW(cache.append(0, {5, {}, {}}));
}

// Properties over random models, policies and prompts.
class RuntimeProperties : public ::testing::Test {
 protected:
  struct Case {
    Model model;
    ComputePolicy policy;
    PromptInput prompt;
  };

  Case random_case(Gen& g) {
    const ModelConfig cfg = small_config(g.index(1, 6), g.coin() ? 8 : 16);
    ComputePolicy pol = g.pick(testing::policy_grid(g.index(0, cfg.n_layers), g.index(2, 3)));
    Model m = synth_model(cfg, g.index(0, 1000));
    return {std::move(m), pol, make_prompt(cfg, g.index(0, 1000), g.index(0, 3), g.index(1, 3))};
  }
};

TEST_F(RuntimeProperties, CacheEntriesExactlyWhereSaRan) {
  Gen g(201);
  for (int trial = 0; trial < 60; ++trial) {
    const Case c = random_case(g);
    const GenerationResult r = generate(c.model, c.policy, c.prompt, 6);
    ASSERT_EQ(r.trace.rows.size(), c.model.config.n_layers * (c.prompt.length() + 5));
    std::size_t expected = 0;
    for (const TraceRow& row : r.trace.rows) {
      const bool wrote = writes_kv(row.action);
      ASSERT_EQ(r.cache.has_entry(row.layer, row.position), wrote)
          << "position " << row.position << " layer " << row.layer << " " << to_string(row.action);
      expected += wrote ? 1 : 0;
    }
    ASSERT_EQ(r.cache.total_entries(), expected);
  }
}

TEST_F(RuntimeProperties, ContextSizesCountOnlyEarlierEntries) {
  Gen g(202);
  for (int trial = 0; trial < 40; ++trial) {
    const Case c = random_case(g);
    const GenerationResult r = generate(c.model, c.policy, c.prompt, 5);
    for (const TraceRow& row : r.trace.rows) {
      if (!writes_kv(row.action)) {
        ASSERT_EQ(row.context, 0u);
        continue;
      }
      std::size_t earlier = 0;
      for (const KvEntry& e : r.cache.layer(row.layer)) earlier += e.position < row.position ? 1 : 0;
      ASSERT_EQ(row.context, earlier + 1);
    }
  }
}

TEST_F(RuntimeProperties, RunsAreDeterministic) {
  Gen g(203);
  for (int trial = 0; trial < 20; ++trial) {
    const Case c = random_case(g);
    const GenerationResult a = generate(c.model, c.policy, c.prompt, 5);
    const GenerationResult b = generate(c.model, c.policy, c.prompt, 5);
    ASSERT_EQ(a.tokens, b.tokens);
    ASSERT_EQ(a.step_logits, b.step_logits);
    ASSERT_EQ(a.trace, b.trace);
    ASSERT_EQ(a.cache, b.cache);
  }
}

TEST_F(RuntimeProperties, GeneratedOnlyScopePreservesThePrompt) {
  Gen g(204);
  RunHooks hooks;
  hooks.retain_hidden = true;
  for (int trial = 0; trial < 30; ++trial) {
    Case c = random_case(g);
    c.policy.scope = TokenScope::generated_only();
    const GenerationResult dense = generate(c.model, ComputePolicy::dense(), c.prompt, 4, std::nullopt, hooks);
    const GenerationResult r = generate(c.model, c.policy, c.prompt, 4, std::nullopt, hooks);
    const std::size_t n = c.prompt.length();
    for (std::size_t p = 0; p < n; ++p) ASSERT_EQ(r.hidden[p], dense.hidden[p]);
    for (std::size_t l = 0; l < c.model.config.n_layers; ++l) {
      for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(r.cache.layer(l)[i], dense.cache.layer(l)[i]);
    }
  }
}

TEST_F(RuntimeProperties, MatchesOracle) {
  Gen g(205);
  for (int trial = 0; trial < 20; ++trial) {
    const Case c = random_case(g);
    const GenerationResult r = generate(c.model, c.policy, c.prompt, 6);
    const oracle::OracleResult o = oracle::oracle_generate(c.model, c.policy, c.prompt, 6);
    ASSERT_EQ(r.tokens, o.tokens) << "trial " << trial;
    for (std::size_t k = 0; k < r.step_logits.size(); ++k) ASSERT_LE(max_abs_diff(r.step_logits[k], o.step_logits[k]), 1e-4f);
  }
}

}  // namespace
}  // namespace skipformer
