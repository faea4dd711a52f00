#pragma once

// JSON run configuration shared by the CLI subcommands.
//
//   {
//     "model":      {"path": "m.mllw"} | {"synthetic": {"config": {...}, "seed": 7}},
//     "policy":     {"mode": "skip_block", "start_layer": 0, "interval": 2, "scope": "all"},
//     "prompt":     {"perceptual_path": "p.pemb", "text_ids": [1, 2, 3]},
//     "generation": {"max_new_tokens": 8, "eos_id": null},
//     "output":     {"report": "r.json", "model": "pruned.mllw", "masks": "pruned.masks"}
//   }
//
// Relative paths resolve against the directory holding the config file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "skipformer/error.hpp"
#include "skipformer/format.hpp"
#include "skipformer/model.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/runtime.hpp"

namespace skipformer {

struct SyntheticSource {
  ModelConfig config;
  std::uint64_t seed = 0;
};

struct ModelSource {
  std::optional<std::filesystem::path> path;
  std::optional<SyntheticSource> synthetic;
};

struct PromptSpec {
  std::optional<std::filesystem::path> perceptual_path;
  std::vector<std::size_t> text_ids;
};

struct OutputPaths {
  std::optional<std::filesystem::path> report;
  std::optional<std::filesystem::path> model;
  std::optional<std::filesystem::path> masks;
};

struct RunConfig {
  ModelSource model;
  ComputePolicy policy;
  PromptSpec prompt;
  std::size_t max_new_tokens = 8;
  std::optional<std::size_t> eos_id;
  OutputPaths output;
};

namespace config_detail {

inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(where + "." + key + ": missing");
  return j.at(key);
}

inline std::size_t count_field(const nlohmann::json& v, const std::string& field) {
  if (!v.is_number_unsigned()) throw ConfigError(field + ": expected a non-negative integer");
  return v.get<std::size_t>();
}

inline std::filesystem::path path_field(const nlohmann::json& v, const std::string& field,
                                        const std::filesystem::path& base) {
  if (!v.is_string() || v.get<std::string>().empty()) throw ConfigError(field + ": expected a non-empty path string");
  std::filesystem::path p(v.get<std::string>());
  return p.is_absolute() ? p : base / p;
}

}  // namespace config_detail

inline TokenScope parse_scope(const std::string& s) {
  if (s == "generated") return TokenScope::generated_only();
  if (s == "all") return TokenScope::all();
  throw PolicyError("unknown scope '" + s + "' (expected \"generated\" or \"all\")");
}

inline const char* scope_name(const TokenScope& scope) {
  if (scope == TokenScope::generated_only()) return "generated";
  if (scope == TokenScope::all()) return "all";
  return "custom";
}

inline ComputePolicy policy_from_json(const nlohmann::json& j) {
  using config_detail::count_field;
  if (!j.is_object()) throw ConfigError("policy: expected an object");
  ComputePolicy p;
  const auto& mode = config_detail::require(j, "mode", "policy");
  if (!mode.is_string()) throw ConfigError("policy.mode: expected a string");
  p.mode = parse_mode(mode.get<std::string>());
  if (j.contains("start_layer")) p.start_layer = count_field(j.at("start_layer"), "policy.start_layer");
  if (j.contains("interval")) p.interval = count_field(j.at("interval"), "policy.interval");
  if (j.contains("scope")) {
    if (!j.at("scope").is_string()) throw ConfigError("policy.scope: expected a string");
    p.scope = parse_scope(j.at("scope").get<std::string>());
  }
  if (p.interval < 1) throw PolicyError("policy.interval: must be >= 1");
  return p;
}

inline nlohmann::ordered_json policy_to_json(const ComputePolicy& p) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(p.mode);
  j["start_layer"] = p.start_layer;
  j["interval"] = p.interval;
  j["scope"] = scope_name(p.scope);
  return j;
}

inline PromptSpec prompt_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  if (!j.is_object()) throw ConfigError("prompt: expected an object");
  PromptSpec spec;
  if (j.contains("perceptual_path") && !j.at("perceptual_path").is_null()) {
    spec.perceptual_path = config_detail::path_field(j.at("perceptual_path"), "prompt.perceptual_path", base);
  }
  if (j.contains("text_ids")) {
    const auto& ids = j.at("text_ids");
    if (!ids.is_array()) throw ConfigError("prompt.text_ids: expected an array");
    for (const auto& id : ids) spec.text_ids.push_back(config_detail::count_field(id, "prompt.text_ids"));
  }
  return spec;
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  using config_detail::count_field;
  using config_detail::require;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig rc;

  if (j.contains("model")) {
    const auto& m = j.at("model");
    const bool has_path = m.is_object() && m.contains("path");
    const bool has_synth = m.is_object() && m.contains("synthetic");
    if (has_path == has_synth) throw ConfigError("model: exactly one of 'path' or 'synthetic' is required");
    if (has_path) {
      rc.model.path = config_detail::path_field(m.at("path"), "model.path", base);
    } else {
      const auto& s = m.at("synthetic");
      SyntheticSource src;
      try {
        src.config = io::config_from_json(require(s, "config", "model.synthetic"));
      } catch (const ShapeError& e) {
        throw ConfigError(std::string("model.synthetic.config: ") + e.what());
      }
      if (s.contains("seed")) src.seed = count_field(s.at("seed"), "model.synthetic.seed");
      rc.model.synthetic = src;
    }
  }
  if (j.contains("policy")) rc.policy = policy_from_json(j.at("policy"));
  if (j.contains("prompt")) rc.prompt = prompt_from_json(j.at("prompt"), base);
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    if (g.contains("max_new_tokens")) rc.max_new_tokens = count_field(g.at("max_new_tokens"), "generation.max_new_tokens");
    if (g.contains("eos_id") && !g.at("eos_id").is_null()) rc.eos_id = count_field(g.at("eos_id"), "generation.eos_id");
  }
  if (j.contains("output")) {
    const auto& o = j.at("output");
    if (!o.is_object()) throw ConfigError("output: expected an object");
    if (o.contains("report")) rc.output.report = config_detail::path_field(o.at("report"), "output.report", base);
    if (o.contains("model")) rc.output.model = config_detail::path_field(o.at("model"), "output.model", base);
    if (o.contains("masks")) rc.output.masks = config_detail::path_field(o.at("masks"), "output.masks", base);
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

inline Model load_model_source(const ModelSource& src) {
  if (src.path) return load_model(*src.path);
  if (src.synthetic) return synth_model(src.synthetic->config, src.synthetic->seed);
  throw ConfigError("model: no model source given");
}

inline PromptInput load_prompt(const PromptSpec& spec, const ModelConfig& cfg) {
  PromptInput prompt;
  if (spec.perceptual_path) {
    try {
      prompt.perceptual = load_perceptual(*spec.perceptual_path);
    } catch (const FormatError& e) {
      throw FormatError(std::string("prompt.perceptual_path: ") + e.what());
    }
    if (prompt.perceptual.rows > 0 && prompt.perceptual.cols != cfg.d_model) {
      throw FormatError("prompt.perceptual_path: dim " + std::to_string(prompt.perceptual.cols) +
                        " does not match d_model " + std::to_string(cfg.d_model));
    }
  }
  prompt.text_ids = spec.text_ids;
  for (std::size_t id : prompt.text_ids) {
    if (id >= cfg.vocab_size) throw ConfigError("prompt.text_ids: id " + std::to_string(id) + " >= vocab_size");
  }
  if (prompt.length() == 0) throw ConfigError("prompt: needs perceptual rows or text_ids");
  return prompt;
}

}  // namespace skipformer
