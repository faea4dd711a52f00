#pragma once

// JSON and plain-text renderings of reports. JSON keys keep insertion order so
// repeated runs produce byte-identical output.

#include <cstdio>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "skipformer/config.hpp"
#include "skipformer/cost.hpp"
#include "skipformer/policy.hpp"
#include "skipformer/pruning.hpp"
#include "skipformer/runtime.hpp"

namespace skipformer {

inline nlohmann::ordered_json to_json(const FlopsReport& r) {
  nlohmann::ordered_json j;
  j["total"] = r.total;
  j["prefill_total"] = r.prefill_total;
  j["decode_total"] = r.decode_total;
  j["dense_total"] = r.dense_total;
  j["reduction_ratio"] = r.reduction_ratio;
  j["block_work"] = r.block_work;
  j["dense_block_work"] = r.dense_block_work;
  j["block_work_reduction"] = r.block_work_reduction;
  j["sequential_depth"] = r.sequential_depth;
  j["dense_depth"] = r.dense_depth;
  j["token_depth"] = r.token_depth;
  j["n_tokens"] = r.n_tokens;
  j["per_layer"] = r.per_layer;
  j["per_layer_depth"] = r.per_layer_depth;
  nlohmann::ordered_json per_action;
  for (std::size_t a = 0; a < kActionKinds; ++a) per_action[to_string(static_cast<ActionKind>(a))] = r.per_action[a];
  j["per_action"] = std::move(per_action);
  return j;
}

inline nlohmann::ordered_json to_json(const ExecutionTrace& trace) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const TraceRow& r : trace.rows) {
    nlohmann::ordered_json j;
    j["position"] = r.position;
    j["layer"] = r.layer;
    j["class"] = to_string(r.token_class);
    j["action"] = to_string(r.action);
    j["context"] = r.context;
    if (r.action == ActionKind::ParallelLead) j["partner_context"] = r.partner_context;
    rows.push_back(std::move(j));
  }
  return rows;
}

inline nlohmann::ordered_json to_json(const SparsityReport& r) {
  nlohmann::ordered_json j;
  j["sparsity"] = r.sparsity();
  j["zeros"] = r.zeros;
  j["total"] = r.total;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const LayerSparsity& l : r.layers) {
    layers.push_back({{"name", l.name},
                      {"sparsity", l.sparsity()},
                      {"zeros", l.zeros},
                      {"total", l.total},
                      {"min_row_zeros", l.min_row_zeros},
                      {"max_row_zeros", l.max_row_zeros}});
  }
  j["layers"] = std::move(layers);
  return j;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string schedule_table(const LayerSchedule& s) {
  std::ostringstream out;
  out << "layer  action\n";
  for (std::size_t l = 0; l < s.n_layers; ++l) {
    char line[64];
    const LayerAction& a = s.in_scope[l];
    if (a.kind == ActionKind::ParallelLead) {
      std::snprintf(line, sizeof line, "%5zu  %s(%zu)\n", l, to_string(a.kind), a.partner);
    } else {
      std::snprintf(line, sizeof line, "%5zu  %s\n", l, to_string(a.kind));
    }
    out << line;
  }
  out << "skipped_fraction " << format_double(skipped_fraction(s)) << "\n";
  return out.str();
}

inline std::string flops_table(const FlopsReport& r) {
  std::ostringstream out;
  char line[128];
  auto row = [&](const char* name, const std::string& value) {
    std::snprintf(line, sizeof line, "%-22s %s\n", name, value.c_str());
    out << line;
  };
  row("positions", std::to_string(r.n_tokens));
  row("flops", std::to_string(r.total));
  row("flops_prefill", std::to_string(r.prefill_total));
  row("flops_decode", std::to_string(r.decode_total));
  row("flops_dense", std::to_string(r.dense_total));
  row("reduction_ratio", format_double(r.reduction_ratio));
  row("block_work_reduction", format_double(r.block_work_reduction));
  row("sequential_depth", std::to_string(r.sequential_depth) + " / " + std::to_string(r.dense_depth));
  row("token_depth", std::to_string(r.token_depth));
  return out.str();
}

}  // namespace skipformer
