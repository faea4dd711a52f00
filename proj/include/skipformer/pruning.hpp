#pragma once

// Post-training unstructured pruning with per-output comparison groups.
//
// Scores and masks here are oriented (out x in): one row per output unit.
// Model weights are stored (in x out), so model-level helpers transpose on
// the way in and out; a stored mask has the weight's stored shape.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/format.hpp"
#include "skipformer/model.hpp"
#include "skipformer/numerics.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/runtime.hpp"
#include "skipformer/splitmix.hpp"

namespace skipformer {

// Which prompt tokens calibration listens to. Text covers generated tokens.
enum class CalibrationScope { Prompt, Text, All };

inline const char* to_string(CalibrationScope s) {
  switch (s) {
    case CalibrationScope::Prompt: return "P";
    case CalibrationScope::Text: return "T";
    case CalibrationScope::All: return "P+T";
  }
  return "?";
}

inline CalibrationScope parse_calibration_scope(std::string_view s) {
  if (s == "P") return CalibrationScope::Prompt;
  if (s == "T") return CalibrationScope::Text;
  if (s == "P+T") return CalibrationScope::All;
  throw PolicyError("unknown calibration scope '" + std::string(s) + "' (expected P, T or P+T)");
}

inline TokenScope token_scope(CalibrationScope s) {
  switch (s) {
    case CalibrationScope::Prompt: return {TokenClass::Perceptual};
    case CalibrationScope::Text: return {TokenClass::Text, TokenClass::Generated};
    case CalibrationScope::All: return TokenScope::all();
  }
  return TokenScope::all();
}

inline constexpr std::size_t kCalibrationDecodeSteps = 8;
inline constexpr std::size_t kSlotsPerBlock = 6;

using BlockNorms = std::array<Vector, kSlotsPerBlock>;  // indexed by LinearSlot

struct CalibrationStats {
  std::vector<BlockNorms> norms;  // per block, L2 norm of each input feature
  std::size_t tokens = 0;

  const Vector& at(std::size_t layer, LinearSlot slot) const {
    return norms.at(layer)[static_cast<std::size_t>(slot)];
  }
};

inline std::size_t input_dim(const ModelConfig& cfg, LinearSlot slot) {
  return slot == LinearSlot::FC2 ? cfg.d_ff : cfg.d_model;
}

// Dense forward over every prompt (plus a fixed greedy continuation when
// generated tokens are in scope), accumulating squared inputs of each linear
// map for the in-scope tokens.
inline CalibrationStats collect_calibration(const Model& model, std::span<const PromptInput> prompts,
                                            CalibrationScope scope) {
  if (prompts.empty()) throw CalibrationError("calibration needs at least one prompt");
  const ModelConfig& cfg = model.config;
  const TokenScope classes = token_scope(scope);
  const std::size_t steps = classes.contains(TokenClass::Generated) ? kCalibrationDecodeSteps : 0;

  std::vector<std::array<std::vector<double>, kSlotsPerBlock>> sums(cfg.n_layers);
  for (auto& block : sums)
    for (LinearSlot slot : kLinearSlots) block[static_cast<std::size_t>(slot)].assign(input_dim(cfg, slot), 0.0);

  std::size_t tokens = 0;
  RunHooks hooks;
  hooks.observer = [&](std::size_t, TokenClass cls, std::size_t layer, LinearSlot slot, std::span<const float> in) {
    if (!classes.contains(cls)) return;
    if (layer == 0 && slot == LinearSlot::Wk) ++tokens;
    auto& acc = sums[layer][static_cast<std::size_t>(slot)];
    for (std::size_t i = 0; i < in.size(); ++i) acc[i] += static_cast<double>(in[i]) * static_cast<double>(in[i]);
  };
  for (const PromptInput& prompt : prompts) generate(model, ComputePolicy::dense(), prompt, steps, std::nullopt, hooks);

  if (tokens == 0) {
    throw CalibrationError(std::string("calibration scope ") + to_string(scope) + " selects no tokens");
  }
  CalibrationStats stats;
  stats.tokens = tokens;
  stats.norms.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t s = 0; s < kSlotsPerBlock; ++s) {
      Vector& out = stats.norms[l][s];
      out.resize(sums[l][s].size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(std::sqrt(sums[l][s][i]));
    }
  }
  return stats;
}

// S[i][j] = |W[i][j]| * norms[j] for W oriented (out x in).
inline Matrix wanda_scores(const Matrix& weight, std::span<const float> norms) {
  if (norms.size() != weight.cols) {
    throw ShapeError("wanda_scores: " + std::to_string(norms.size()) + " norms for " + std::to_string(weight.cols) +
                     " inputs");
  }
  Matrix s(weight.rows, weight.cols);
  for (std::size_t i = 0; i < weight.rows; ++i)
    for (std::size_t j = 0; j < weight.cols; ++j) s(i, j) = std::abs(weight(i, j)) * norms[j];
  return s;
}

struct PruneMask {
  Matrix keep;  // 1 keeps, 0 prunes
  double sparsity = 0.0;
};

inline std::size_t pruned_per_row(double sparsity, std::size_t in_dim) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw RangeError("sparsity must be in [0, 1)");
  return static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(in_dim)));
}

// Zeros the floor(s * in) lowest scores of each row. Among equal scores the
// higher column index is pruned first.
inline PruneMask prune_per_output(const Matrix& scores, double sparsity) {
  const std::size_t k = pruned_per_row(sparsity, scores.cols);
  PruneMask mask{Matrix(scores.rows, scores.cols, 1.0f), sparsity};
  std::vector<std::size_t> order(scores.cols);
  for (std::size_t i = 0; i < scores.rows; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto row = scores.row(i);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return row[a] < row[b] || (row[a] == row[b] && a > b); });
    for (std::size_t c = 0; c < k; ++c) mask.keep(i, order[c]) = 0.0f;
  }
  return mask;
}

inline PruneMask magnitude_mask(const Matrix& weight, double sparsity) {
  Matrix abs_w(weight.rows, weight.cols);
  for (std::size_t i = 0; i < weight.data.size(); ++i) abs_w.data[i] = std::abs(weight.data[i]);
  return prune_per_output(abs_w, sparsity);
}

// Per row, a partial Fisher-Yates shuffle of the column indices picks the
// pruned positions: step c swaps index c with c + (u mod (in - c)).
inline PruneMask random_mask(const Matrix& weight, double sparsity, std::uint64_t seed) {
  const std::size_t in = weight.cols;
  const std::size_t k = pruned_per_row(sparsity, in);
  PruneMask mask{Matrix(weight.rows, in, 1.0f), sparsity};
  SplitMix64 rng(seed);
  std::vector<std::size_t> idx(in);
  for (std::size_t i = 0; i < weight.rows; ++i) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t j = c + static_cast<std::size_t>(rng.next() % (in - c));
      std::swap(idx[c], idx[j]);
      mask.keep(i, idx[c]) = 0.0f;
    }
  }
  return mask;
}

enum class PruneMethod { Wanda, Magnitude, Random };

inline const char* to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::Wanda: return "wanda";
    case PruneMethod::Magnitude: return "magnitude";
    case PruneMethod::Random: return "random";
  }
  return "?";
}

inline PruneMethod parse_prune_method(std::string_view s) {
  if (s == "wanda") return PruneMethod::Wanda;
  if (s == "magnitude") return PruneMethod::Magnitude;
  if (s == "random") return PruneMethod::Random;
  throw PolicyError("unknown pruning method '" + std::string(s) + "'");
}

// Masks for the six linear maps of every block, in stored (in x out) layout.
struct ModelMasks {
  ModelConfig config;
  std::vector<std::array<Matrix, kSlotsPerBlock>> layers;

  const Matrix& at(std::size_t layer, LinearSlot slot) const {
    return layers.at(layer)[static_cast<std::size_t>(slot)];
  }
  Matrix& at(std::size_t layer, LinearSlot slot) { return layers.at(layer)[static_cast<std::size_t>(slot)]; }

  static ModelMasks filled(const ModelConfig& cfg, float value) {
    ModelMasks m{cfg, {}};
    m.layers.resize(cfg.n_layers);
    for (auto& block : m.layers) {
      for (LinearSlot slot : kLinearSlots) {
        const std::size_t out = slot == LinearSlot::FC1 ? cfg.d_ff : cfg.d_model;
        block[static_cast<std::size_t>(slot)] = Matrix(input_dim(cfg, slot), out, value);
      }
    }
    return m;
  }

  bool operator==(const ModelMasks&) const = default;
};

// Random masks draw one seed per (block, slot) from a stream seeded with `seed`.
inline ModelMasks build_masks(const Model& model, PruneMethod method, double sparsity,
                              const CalibrationStats* stats = nullptr, std::uint64_t seed = 0) {
  if (method == PruneMethod::Wanda && stats == nullptr) throw CalibrationError("wanda pruning needs calibration stats");
  if (stats != nullptr && stats->norms.size() != model.config.n_layers) {
    throw ShapeError("calibration stats do not match model depth");
  }
  ModelMasks masks{model.config, {}};
  masks.layers.resize(model.config.n_layers);
  SplitMix64 seeds(seed);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    for (LinearSlot slot : kLinearSlots) {
      const Matrix w = model.blocks[l].linear(slot).transposed();  // out x in
      PruneMask m;
      switch (method) {
        case PruneMethod::Wanda: m = prune_per_output(wanda_scores(w, stats->at(l, slot)), sparsity); break;
        case PruneMethod::Magnitude: m = magnitude_mask(w, sparsity); break;
        case PruneMethod::Random: m = random_mask(w, sparsity, seeds.next()); break;
      }
      masks.at(l, slot) = m.keep.transposed();
    }
  }
  return masks;
}

struct LayerSparsity {
  std::string name;
  std::size_t zeros = 0;
  std::size_t total = 0;
  std::size_t min_row_zeros = 0;  // over output units
  std::size_t max_row_zeros = 0;

  double sparsity() const { return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total); }
};

struct SparsityReport {
  std::vector<LayerSparsity> layers;
  std::size_t zeros = 0;
  std::size_t total = 0;

  double sparsity() const { return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total); }
};

struct PrunedModel {
  Model model;
  SparsityReport report;
};

inline SparsityReport sparsity_report(const ModelMasks& masks) {
  SparsityReport r;
  for (std::size_t l = 0; l < masks.layers.size(); ++l) {
    for (LinearSlot slot : kLinearSlots) {
      const Matrix& m = masks.at(l, slot);
      LayerSparsity ls{"blocks." + std::to_string(l) + "." + to_string(slot), 0, m.data.size(), m.rows, 0};
      for (std::size_t o = 0; o < m.cols; ++o) {
        std::size_t z = 0;
        for (std::size_t i = 0; i < m.rows; ++i) z += m(i, o) == 0.0f ? 1 : 0;
        ls.zeros += z;
        ls.min_row_zeros = std::min(ls.min_row_zeros, z);
        ls.max_row_zeros = std::max(ls.max_row_zeros, z);
      }
      r.zeros += ls.zeros;
      r.total += ls.total;
      r.layers.push_back(std::move(ls));
    }
  }
  return r;
}

// W <- W * M for every linear map. An output unit whose whole weight row is
// pruned is removed outright, so its bias goes too.
inline PrunedModel apply_masks(const Model& model, const ModelMasks& masks) {
  if (masks.layers.size() != model.config.n_layers) throw ShapeError("mask set does not match model depth");
  PrunedModel out{model, sparsity_report(masks)};
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    BlockWeights& b = out.model.blocks[l];
    for (LinearSlot slot : kLinearSlots) {
      Matrix& w = b.linear(slot);
      const Matrix& m = masks.at(l, slot);
      if (m.rows != w.rows || m.cols != w.cols) {
        throw ShapeError(std::string("mask shape mismatch for ") + to_string(slot) + " of block " + std::to_string(l));
      }
      for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] *= m.data[i];
      if (Vector* bias = b.bias(slot)) {
        for (std::size_t o = 0; o < m.cols; ++o) {
          bool all_pruned = true;
          for (std::size_t i = 0; i < m.rows && all_pruned; ++i) all_pruned = m(i, o) == 0.0f;
          if (all_pruned) (*bias)[o] = 0.0f;
        }
      }
    }
  }
  return out;
}

// Mask containers ---------------------------------------------------------------

namespace io {

inline std::vector<TensorSpec> mask_tensor_specs(const ModelConfig& cfg) {
  std::vector<TensorSpec> specs;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (LinearSlot slot : kLinearSlots) {
      const std::size_t out = slot == LinearSlot::FC1 ? cfg.d_ff : cfg.d_model;
      specs.push_back({"blocks." + std::to_string(l) + "." + to_string(slot), {input_dim(cfg, slot), out}});
    }
  }
  return specs;
}

}  // namespace io

inline Bytes serialize_masks(const ModelMasks& masks) {
  const auto specs = io::mask_tensor_specs(masks.config);
  Bytes payload;
  std::size_t i = 0;
  for (std::size_t l = 0; l < masks.config.n_layers; ++l) {
    for (LinearSlot slot : kLinearSlots) {
      const Matrix& m = masks.at(l, slot);
      if (m.data.size() != specs[i].elements()) throw ShapeError("mask '" + specs[i].name + "' has wrong size");
      for (float v : m.data) payload.push_back(v != 0.0f ? 1 : 0);
      ++i;
    }
  }
  nlohmann::ordered_json header;
  header["dtype"] = "mask-u8";
  header["config"] = io::config_to_json(masks.config);
  return io::encode_container(std::move(header), specs, 1, payload);
}

inline ModelMasks deserialize_masks(const Bytes& bytes) {
  const io::DecodedContainer c = io::decode_container(bytes, "mask-u8", 1, &io::mask_tensor_specs);
  ModelMasks masks = ModelMasks::filled(c.config, 1.0f);
  const auto specs = io::mask_tensor_specs(c.config);
  const std::uint8_t* p = c.payload;
  std::size_t i = 0;
  for (std::size_t l = 0; l < c.config.n_layers; ++l) {
    for (LinearSlot slot : kLinearSlots) {
      for (float& v : masks.at(l, slot).data) {
        if (*p > 1) throw FormatError("tensor '" + specs[i].name + "': mask byte is not 0 or 1");
        v = static_cast<float>(*p++);
      }
      ++i;
    }
  }
  return masks;
}

inline void save_masks(const ModelMasks& masks, const std::filesystem::path& path) {
  io::write_file(path, serialize_masks(masks));
}

inline ModelMasks load_masks(const std::filesystem::path& path) { return deserialize_masks(io::read_file(path)); }

}  // namespace skipformer
