#pragma once

// Shared fixtures for the test suites: seeded generators, small models and
// prompts, and a scratch directory.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "skipformer/model.hpp"
#include "skipformer/numerics.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/runtime.hpp"
#include "skipformer/splitmix.hpp"

namespace skipformer::testing {

// Deterministic value generator for property loops.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  float uniform(float lo, float hi) { return lo + static_cast<float>(rng_.next_unit()) * (hi - lo); }

  // Inclusive range.
  std::size_t index(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng_.next() % (hi - lo + 1));
  }

  bool coin() { return (rng_.next() & 1u) != 0; }

  Vector vector(std::size_t n, float lo = -1.0f, float hi = 1.0f) {
    Vector v(n);
    for (float& x : v) x = uniform(lo, hi);
    return v;
  }

  Matrix matrix(std::size_t r, std::size_t c, float lo = -1.0f, float hi = 1.0f) {
    Matrix m(r, c);
    for (float& x : m.data) x = uniform(lo, hi);
    return m;
  }

  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items[index(0, items.size() - 1)];
  }

 private:
  SplitMix64 rng_;
};

inline ModelConfig small_config(std::size_t n_layers, std::size_t d_model, std::size_t n_heads = 2) {
  ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.d_model = d_model;
  cfg.n_heads = n_heads;
  cfg.d_ff = 4 * d_model;
  cfg.vocab_size = 32;
  cfg.max_positions = 32;
  return cfg;
}

struct SeededModel {
  ModelConfig config;
  std::uint64_t seed;
};

// Ten seeded models over N in {4,6,8} and d in {8,16}; every pair appears.
inline std::vector<SeededModel> acceptance_models() {
  const std::size_t depths[] = {4, 6, 8};
  const std::size_t widths[] = {8, 16};
  std::vector<SeededModel> out;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const std::size_t i = static_cast<std::size_t>(seed - 1);
    out.push_back({small_config(depths[i % 3], widths[(i / 3) % 2]), seed});
  }
  return out;
}

// n_perceptual random rows plus n_text ids, all derived from seed.
inline PromptInput make_prompt(const ModelConfig& cfg, std::uint64_t seed, std::size_t n_perceptual = 4,
                               std::size_t n_text = 3) {
  Gen g(seed ^ 0x5eed5eed5eedULL);
  PromptInput p;
  p.perceptual = g.matrix(n_perceptual, cfg.d_model, -0.5f, 0.5f);
  for (std::size_t i = 0; i < n_text; ++i) p.text_ids.push_back(g.index(0, cfg.vocab_size - 1));
  return p;
}

// All policies exercised by the differential suites: every mode with both scopes.
inline std::vector<ComputePolicy> policy_grid(std::size_t start_layer = 0, std::size_t interval = 2) {
  std::vector<ComputePolicy> out;
  for (PolicyMode mode : kAllModes) {
    for (const TokenScope& scope : {TokenScope::generated_only(), TokenScope::all()}) {
      out.push_back({mode, start_layer, interval, scope});
    }
  }
  return out;
}

inline BlockWeights zero_block(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  BlockWeights b;
  b.ln1_gamma = b.ln1_beta = b.ln2_gamma = b.ln2_beta = Vector(d, 0.0f);
  b.wq = b.wk = b.wv = b.wo = Matrix(d, d);
  b.fc1 = Matrix(d, cfg.d_ff);
  b.fc1_bias = Vector(cfg.d_ff, 0.0f);
  b.fc2 = Matrix(cfg.d_ff, d);
  b.fc2_bias = Vector(d, 0.0f);
  return b;
}

// A block with weights scaled up from the synthetic range so residuals are not tiny.
inline BlockWeights random_block(const ModelConfig& cfg, std::uint64_t seed) {
  Gen g(seed);
  const std::size_t d = cfg.d_model;
  BlockWeights b;
  b.ln1_gamma = g.vector(d, 0.5f, 1.5f);
  b.ln1_beta = g.vector(d, -0.2f, 0.2f);
  b.wq = g.matrix(d, d, -0.5f, 0.5f);
  b.wk = g.matrix(d, d, -0.5f, 0.5f);
  b.wv = g.matrix(d, d, -0.5f, 0.5f);
  b.wo = g.matrix(d, d, -0.5f, 0.5f);
  b.ln2_gamma = g.vector(d, 0.5f, 1.5f);
  b.ln2_beta = g.vector(d, -0.2f, 0.2f);
  b.fc1 = g.matrix(d, cfg.d_ff, -0.5f, 0.5f);
  b.fc1_bias = g.vector(cfg.d_ff, -0.2f, 0.2f);
  b.fc2 = g.matrix(cfg.d_ff, d, -0.5f, 0.5f);
  b.fc2_bias = g.vector(d, -0.2f, 0.2f);
  return b;
}

inline std::vector<KvEntry> random_entries(Gen& g, std::size_t count, std::size_t d) {
  std::vector<KvEntry> out;
  for (std::size_t p = 0; p < count; ++p) out.push_back({p, g.vector(d), g.vector(d)});
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("skipformer_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline bool bitwise_equal(const std::vector<Vector>& a, const std::vector<Vector>& b) { return a == b; }

}  // namespace skipformer::testing
