#pragma once

// Subcommand implementations for the skipformer CLI. Kept apart from argument
// parsing so tests can drive them in-process.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "skipformer/config.hpp"
#include "skipformer/cost.hpp"
#include "skipformer/format.hpp"
#include "skipformer/oracle.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/pruning.hpp"
#include "skipformer/report.hpp"
#include "skipformer/runtime.hpp"

namespace skipformer::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2, kMismatch = 3 };

struct GlobalOptions {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> output;
  bool json = false;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

// Runs fn, mapping exceptions onto the exit-code contract.
inline int guarded(const Streams& io, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    io.err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const PolicyError& e) {
    io.err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const Error& e) {
    io.err << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

inline RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig rc = g.config ? load_run_config(*g.config) : RunConfig{};
  if (g.seed && rc.model.synthetic) rc.model.synthetic->seed = *g.seed;
  return rc;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

// synth ----------------------------------------------------------------------

struct SynthArgs {
  ModelConfig config{4, 16, 2, 64, 32, 32};
  bool config_from_flags = false;
};

inline int cmd_synth(const GlobalOptions& g, const SynthArgs& args, const Streams& io) {
  RunConfig rc = resolve_config(g);
  ModelConfig cfg = args.config;
  std::uint64_t seed = g.seed.value_or(0);
  if (rc.model.synthetic && !args.config_from_flags) {
    cfg = rc.model.synthetic->config;
    seed = rc.model.synthetic->seed;
  }
  try {
    cfg.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
  const std::optional<fs::path> out = g.output ? g.output : rc.output.model;
  if (!out) throw ConfigError("--output is required for synth");
  save_model(synth_model(cfg, seed), *out);
  spdlog::info("synth: wrote {} (seed {})", out->string(), seed);
  io.out << "wrote " << out->string() << "\n";
  return kOk;
}

// generate -------------------------------------------------------------------

inline int cmd_generate(const GlobalOptions& g, const Streams& io) {
  const RunConfig rc = resolve_config(g);
  const Model model = load_model_source(rc.model);
  const PromptInput prompt = load_prompt(rc.prompt, model.config);
  const LayerSchedule schedule = resolve_schedule(rc.policy, model.config.n_layers);
  spdlog::debug("generate: {} prompt tokens, max_new_tokens {}", prompt.length(), rc.max_new_tokens);

  const GenerationResult result = generate(model, rc.policy, prompt, rc.max_new_tokens, rc.eos_id);
  const FlopsReport flops = trace_flops(result.trace, model.config);

  nlohmann::ordered_json doc;
  doc["policy"] = policy_to_json(rc.policy);
  doc["n_prompt"] = result.n_prompt;
  doc["tokens"] = result.tokens;
  doc["skipped_fraction"] = skipped_fraction(schedule);
  doc["flops"] = to_json(flops);
  doc["trace"] = to_json(result.trace);
  const std::string text = doc.dump(2) + "\n";

  const std::optional<fs::path> out = g.output ? g.output : rc.output.report;
  if (out) write_text(*out, text);
  if (g.json) {
    io.out << text;
  } else {
    io.out << "tokens";
    for (std::size_t t : result.tokens) io.out << " " << t;
    io.out << "\n" << "skipped_fraction       " << format_double(skipped_fraction(schedule)) << "\n";
    io.out << flops_table(flops);
  }
  return kOk;
}

// schedule -------------------------------------------------------------------

struct ScheduleArgs {
  std::optional<std::string> mode;
  std::optional<std::size_t> start_layer;
  std::optional<std::size_t> interval;
  std::optional<std::string> scope;
  std::optional<std::size_t> n_layers;
};

inline int cmd_schedule(const GlobalOptions& g, const ScheduleArgs& args, const Streams& io) {
  const RunConfig rc = resolve_config(g);
  ComputePolicy policy = rc.policy;
  if (args.mode) policy.mode = parse_mode(*args.mode);
  if (args.start_layer) policy.start_layer = *args.start_layer;
  if (args.interval) policy.interval = *args.interval;
  if (args.scope) policy.scope = parse_scope(*args.scope);

  std::size_t n_layers = 0;
  if (args.n_layers) {
    n_layers = *args.n_layers;
  } else if (rc.model.synthetic) {
    n_layers = rc.model.synthetic->config.n_layers;
  } else if (rc.model.path) {
    n_layers = load_model(*rc.model.path).config.n_layers;
  } else {
    throw ConfigError("--layers is required without a model in the config");
  }

  const LayerSchedule s = resolve_schedule(policy, n_layers);
  if (g.json) {
    nlohmann::ordered_json doc;
    doc["policy"] = policy_to_json(policy);
    doc["n_layers"] = n_layers;
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < n_layers; ++l) {
      nlohmann::ordered_json row{{"layer", l}, {"action", to_string(s.in_scope[l].kind)}};
      if (s.in_scope[l].kind == ActionKind::ParallelLead) row["partner"] = s.in_scope[l].partner;
      layers.push_back(std::move(row));
    }
    doc["layers"] = std::move(layers);
    doc["skipped_fraction"] = skipped_fraction(s);
    io.out << doc.dump(2) << "\n";
  } else {
    io.out << schedule_table(s);
  }
  return kOk;
}

// prune ----------------------------------------------------------------------

struct PruneArgs {
  std::string method = "wanda";
  double sparsity = 0.5;
  std::string scope = "P+T";
  std::optional<fs::path> calib_dir;
};

inline std::vector<PromptInput> load_calibration_prompts(const RunConfig& rc, const PruneArgs& args,
                                                         const ModelConfig& cfg) {
  std::vector<PromptInput> prompts;
  if (!args.calib_dir) {
    prompts.push_back(load_prompt(rc.prompt, cfg));
    return prompts;
  }
  if (!fs::is_directory(*args.calib_dir)) throw ConfigError("--calib-dir: '" + args.calib_dir->string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(*args.calib_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("--calib-dir: no .json prompt files in '" + args.calib_dir->string() + "'");
  for (const fs::path& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("calibration prompt '" + f.string() + "': " + e.what());
    }
    prompts.push_back(load_prompt(prompt_from_json(j, f.parent_path()), cfg));
  }
  return prompts;
}

inline int cmd_prune(const GlobalOptions& g, const PruneArgs& args, const Streams& io) {
  const RunConfig rc = resolve_config(g);
  const PruneMethod method = parse_prune_method(args.method);
  const CalibrationScope scope = parse_calibration_scope(args.scope);
  if (!(args.sparsity >= 0.0 && args.sparsity < 1.0)) throw ConfigError("--sparsity must be in [0, 1)");
  const std::optional<fs::path> out = g.output ? g.output : rc.output.model;
  if (!out) throw ConfigError("--output is required for prune");
  const fs::path masks_path = rc.output.masks.value_or(fs::path(out->string() + ".masks"));

  const Model model = load_model_source(rc.model);
  std::optional<CalibrationStats> stats;
  if (method == PruneMethod::Wanda) {
    const auto prompts = load_calibration_prompts(rc, args, model.config);
    stats = collect_calibration(model, prompts, scope);
    spdlog::info("prune: calibrated on {} tokens from {} prompts", stats->tokens, prompts.size());
  }
  std::uint64_t seed = g.seed.value_or(rc.model.synthetic ? rc.model.synthetic->seed : 0);
  const ModelMasks masks = build_masks(model, method, args.sparsity, stats ? &*stats : nullptr, seed);
  const PrunedModel pruned = apply_masks(model, masks);
  save_model(pruned.model, *out);
  save_masks(masks, masks_path);

  nlohmann::ordered_json doc;
  doc["method"] = to_string(method);
  doc["target_sparsity"] = args.sparsity;
  doc["calibration_scope"] = method == PruneMethod::Wanda ? nlohmann::ordered_json(to_string(scope)) : nlohmann::ordered_json();
  doc["calibration_tokens"] = stats ? stats->tokens : 0;
  doc["model"] = out->string();
  doc["masks"] = masks_path.string();
  doc["report"] = to_json(pruned.report);
  if (g.json) {
    io.out << doc.dump(2) << "\n";
  } else {
    io.out << "method " << to_string(method) << "  target " << format_double(args.sparsity) << "  realized "
           << format_double(pruned.report.sparsity()) << "\n";
    for (const LayerSparsity& l : pruned.report.layers) {
      char line[128];
      std::snprintf(line, sizeof line, "%-16s %s  row zeros %zu..%zu\n", l.name.c_str(),
                    format_double(l.sparsity()).c_str(), l.min_row_zeros, l.max_row_zeros);
      io.out << line;
    }
    io.out << "wrote " << out->string() << " and " << masks_path.string() << "\n";
  }
  return kOk;
}

// compare --------------------------------------------------------------------

struct CompareArgs {
  std::optional<std::size_t> max_new;
  double tolerance = 1e-4;
  bool all_policies = false;
  std::optional<std::size_t> corrupt_layer;  // fault injection
};

struct Comparison {
  bool ok = true;
  float worst = 0.0f;
  std::optional<std::size_t> step;
  std::optional<std::size_t> position;
  std::optional<std::size_t> layer;
  std::string reason;
};

// Adds 1 to every component of the first cached entry at `layer`.
inline void corrupt_cache(RaggedKvCache& cache, std::size_t layer) {
  if (layer >= cache.n_layers()) return;
  auto& entries = cache.mutable_layer(layer);
  if (entries.empty()) return;
  for (float& v : entries.front().key) v += 1.0f;
  for (float& v : entries.front().value) v += 1.0f;
}

inline Comparison compare_runs(const Model& model, const ComputePolicy& policy, const PromptInput& prompt,
                               std::size_t max_new, double tolerance, std::optional<std::size_t> corrupt_layer) {
  RunHooks hooks;
  hooks.retain_hidden = true;
  if (corrupt_layer) hooks.after_prefill = [l = *corrupt_layer](RaggedKvCache& c) { corrupt_cache(c, l); };
  const GenerationResult run = generate(model, policy, prompt, max_new, std::nullopt, hooks);
  const oracle::OracleResult ref = oracle::oracle_generate(model, policy, prompt, max_new);

  Comparison c;
  const std::size_t steps = std::min(run.tokens.size(), ref.tokens.size());
  if (run.tokens.size() != ref.tokens.size()) {
    c.ok = false;
    c.reason = "token count differs";
  }
  for (std::size_t k = 0; k < steps; ++k) {
    const float dev = max_abs_diff(run.step_logits[k], ref.step_logits[k]);
    c.worst = std::max(c.worst, dev);
    const bool token_diff = run.tokens[k] != ref.tokens[k];
    if ((dev > tolerance || token_diff) && !c.step) {
      c.ok = false;
      c.step = k;
      c.position = prompt.length() - 1 + k;
      c.reason = token_diff ? "token mismatch" : "logit deviation";
      const LayerHidden& mine = run.hidden.at(*c.position);
      const std::vector<Vector>& theirs = ref.step_hidden[k];
      for (std::size_t i = 1; i < mine.size(); ++i) {
        if (max_abs_diff(mine[i], theirs[i]) > tolerance) {
          c.layer = i - 1;
          break;
        }
      }
    }
  }
  return c;
}

inline std::vector<ComputePolicy> all_policies(const ComputePolicy& base) {
  std::vector<ComputePolicy> out;
  for (PolicyMode mode : kAllModes) {
    for (const TokenScope& scope : {TokenScope::generated_only(), TokenScope::all()}) {
      ComputePolicy p = base;
      p.mode = mode;
      p.scope = scope;
      if (mode == PolicyMode::ParallelBlocks) p.interval = std::max<std::size_t>(p.interval, 2);
      out.push_back(p);
    }
  }
  return out;
}

inline int cmd_compare(const GlobalOptions& g, const CompareArgs& args, const Streams& io) {
  const RunConfig rc = resolve_config(g);
  const Model model = load_model_source(rc.model);
  const PromptInput prompt = load_prompt(rc.prompt, model.config);
  const std::size_t max_new = args.max_new.value_or(rc.max_new_tokens);
  const std::vector<ComputePolicy> policies = args.all_policies ? all_policies(rc.policy) : std::vector{rc.policy};

  bool all_ok = true;
  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  for (const ComputePolicy& p : policies) {
    const Comparison c = compare_runs(model, p, prompt, max_new, args.tolerance, args.corrupt_layer);
    all_ok = all_ok && c.ok;
    nlohmann::ordered_json j;
    j["policy"] = policy_to_json(p);
    j["ok"] = c.ok;
    j["max_logit_deviation"] = c.worst;
    if (!c.ok) {
      j["reason"] = c.reason;
      j["first_divergence_step"] = c.step ? nlohmann::ordered_json(*c.step) : nlohmann::ordered_json();
      j["first_divergence_position"] = c.position ? nlohmann::ordered_json(*c.position) : nlohmann::ordered_json();
      j["first_divergence_layer"] = c.layer ? nlohmann::ordered_json(*c.layer) : nlohmann::ordered_json();
    }
    results.push_back(j);
    if (!g.json) {
      char line[256];
      std::snprintf(line, sizeof line, "%-16s %-9s %s  worst %.3g", to_string(p.mode), scope_name(p.scope),
                    c.ok ? "ok" : "DIVERGED", static_cast<double>(c.worst));
      io.out << line;
      if (!c.ok) {
        io.out << "  (" << c.reason;
        if (c.step) io.out << " at step " << *c.step << ", position " << *c.position;
        if (c.layer) io.out << ", first divergent layer " << *c.layer;
        io.out << ")";
      }
      io.out << "\n";
    }
  }
  if (g.json) io.out << results.dump(2) << "\n";
  return all_ok ? kOk : kMismatch;
}

// sweep ----------------------------------------------------------------------

struct SweepArgs {
  std::string axis = "interval";
  std::vector<std::size_t> values;
};

inline std::string sweep_csv(const Model& model, const ComputePolicy& base, const PromptInput& prompt,
                             std::size_t max_new, const SweepArgs& args) {
  if (args.values.empty()) throw ConfigError("--values must not be empty");
  if (args.axis != "interval" && args.axis != "start_layer") {
    throw ConfigError("--axis must be 'interval' or 'start_layer'");
  }
  if (max_new == 0) throw ConfigError("sweep needs max_new_tokens >= 1");
  const GenerationResult dense = generate(model, ComputePolicy::dense(), prompt, max_new);

  std::ostringstream csv;
  csv << "axis,value,mode,scope,skipped_fraction,flops_reduction,block_work_reduction,token_depth,max_logit_deviation\n";
  for (std::size_t v : args.values) {
    ComputePolicy p = base;
    (args.axis == "interval" ? p.interval : p.start_layer) = v;
    const LayerSchedule s = resolve_schedule(p, model.config.n_layers);
    const GenerationResult run = generate(model, p, prompt, max_new);
    const FlopsReport r = trace_flops(run.trace, model.config);
    const float dev = max_abs_diff(run.step_logits.back(), dense.step_logits.back());
    char line[256];
    std::snprintf(line, sizeof line, "%s,%zu,%s,%s,%.9g,%.9g,%.9g,%zu,%.9g\n", args.axis.c_str(), v,
                  to_string(p.mode), scope_name(p.scope), skipped_fraction(s), r.reduction_ratio,
                  r.block_work_reduction, r.token_depth, static_cast<double>(dev));
    csv << line;
  }
  return csv.str();
}

inline int cmd_sweep(const GlobalOptions& g, const SweepArgs& args, const Streams& io) {
  const RunConfig rc = resolve_config(g);
  const Model model = load_model_source(rc.model);
  const PromptInput prompt = load_prompt(rc.prompt, model.config);
  const std::string csv = sweep_csv(model, rc.policy, prompt, rc.max_new_tokens, args);
  if (g.output) {
    write_text(*g.output, csv);
  } else {
    io.out << csv;
  }
  return kOk;
}

}  // namespace skipformer::cli
