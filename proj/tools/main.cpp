#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <string>

#include "commands.hpp"

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("skipformer");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("SKIPFORMER_LOG");
  const std::string level = env ? env : "error";
  if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else {
    spdlog::set_level(spdlog::level::err);
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace skipformer::cli;
  setup_logging();

  CLI::App app{"skipformer: layer skipping, parallel blocks and pruning for small decoder models"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  std::string config, output;
  std::uint64_t seed = 0;
  auto* config_opt = app.add_option("--config", config, "run configuration (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "seed override for synthetic models");
  auto* output_opt = app.add_option("--output", output, "output path");
  app.add_flag("--json", g.json, "print JSON instead of tables");

  SynthArgs synth;
  std::string activation = "relu";
  auto* synth_cmd = app.add_subcommand("synth", "write a seeded synthetic model file");
  auto* l_opt = synth_cmd->add_option("--layers", synth.config.n_layers);
  auto* d_opt = synth_cmd->add_option("--d-model", synth.config.d_model);
  auto* h_opt = synth_cmd->add_option("--heads", synth.config.n_heads);
  auto* f_opt = synth_cmd->add_option("--d-ff", synth.config.d_ff);
  auto* v_opt = synth_cmd->add_option("--vocab", synth.config.vocab_size);
  auto* p_opt = synth_cmd->add_option("--max-positions", synth.config.max_positions);
  auto* a_opt = synth_cmd->add_option("--activation", activation)->check(CLI::IsMember({"relu", "gelu"}));

  auto* gen_cmd = app.add_subcommand("generate", "greedy generation under the configured policy");

  ScheduleArgs sched;
  auto* sched_cmd = app.add_subcommand("schedule", "print the per-layer action table");
  sched_cmd->add_option("--mode", sched.mode);
  sched_cmd->add_option("--start-layer", sched.start_layer);
  sched_cmd->add_option("--interval", sched.interval);
  sched_cmd->add_option("--scope", sched.scope);
  sched_cmd->add_option("--layers", sched.n_layers);

  PruneArgs prune;
  std::string calib_dir;
  auto* prune_cmd = app.add_subcommand("prune", "prune per-block linears and write the model and masks");
  prune_cmd->add_option("--method", prune.method)->check(CLI::IsMember({"wanda", "magnitude", "random"}));
  prune_cmd->add_option("--sparsity", prune.sparsity);
  prune_cmd->add_option("--scope", prune.scope)->check(CLI::IsMember({"P", "T", "P+T"}));
  auto* calib_opt = prune_cmd->add_option("--calib-dir", calib_dir, "directory of prompt JSON files");

  CompareArgs cmp;
  std::size_t corrupt_layer = 0;
  auto* cmp_cmd = app.add_subcommand("compare", "check the cached runtime against the full-recompute oracle");
  cmp_cmd->add_option("--max-new", cmp.max_new);
  cmp_cmd->add_option("--tolerance", cmp.tolerance);
  cmp_cmd->add_flag("--all-policies", cmp.all_policies, "every mode with both scopes");
  auto* corrupt_opt = cmp_cmd->add_option("--corrupt-layer", corrupt_layer)->group("");

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "CSV over an interval or start_layer axis");
  sweep_cmd->add_option("--axis", sweep.axis)->check(CLI::IsMember({"interval", "start_layer"}));
  sweep_cmd->add_option("--values", sweep.values)->delimiter(',')->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  if (*config_opt) g.config = config;
  if (*seed_opt) g.seed = seed;
  if (*output_opt) g.output = output;
  if (*calib_opt) prune.calib_dir = calib_dir;
  if (*corrupt_opt) cmp.corrupt_layer = corrupt_layer;
  synth.config.activation = activation == "gelu" ? skipformer::ActivationKind::GELU : skipformer::ActivationKind::ReLU;
  synth.config_from_flags = *l_opt || *d_opt || *h_opt || *f_opt || *v_opt || *p_opt || *a_opt;

  const Streams io{std::cout, std::cerr};
  return guarded(io, [&]() -> int {
    if (*synth_cmd) return cmd_synth(g, synth, io);
    if (*gen_cmd) return cmd_generate(g, io);
    if (*sched_cmd) return cmd_schedule(g, sched, io);
    if (*prune_cmd) return cmd_prune(g, prune, io);
    if (*cmp_cmd) return cmd_compare(g, cmp, io);
    return cmd_sweep(g, sweep, io);
  });
}
