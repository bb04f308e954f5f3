// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0
//
// stfmerge: merge fine-tuned checkpoints into one multi-task checkpoint by
// superposing task-specific features, with baselines and diagnostics.
// Progress goes to stderr; machine-readable artifacts go to files.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stfmerge/config.hpp"
#include "stfmerge/diagnostics.hpp"
#include "stfmerge/merge_pipeline.hpp"
#include "stfmerge/tensor_store.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitFormat = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config_path;
  std::string base_path;
  std::vector<std::string> task_args;
  std::string output_path;
  std::string report_path;
  std::string preset;
  std::optional<double> eta;
  std::optional<double> gamma;
  std::optional<double> rank_tol;
  std::optional<double> solver_tol;
  std::optional<std::string> mode;
  std::optional<std::string> baseline;
  std::optional<int> threads;
  std::optional<std::string> out_dtype;
  bool lora = false;
  std::vector<double> lora_scales;
};

void add_common_flags(CLI::App* cmd, CommonArgs& args, bool with_output) {
  cmd->add_option("--config", args.config_path, "JSON config file; flags override its values");
  cmd->add_option("--base", args.base_path, "pre-trained base checkpoint");
  cmd->add_option("--task", args.task_args,
                  "task checkpoint, 'path' or 'id=path'; repeat per task");
  if (with_output) cmd->add_option("--out", args.output_path, "merged checkpoint path");
  cmd->add_option("--report", args.report_path, "merge report JSON path");
  cmd->add_option("--preset", args.preset,
                  "hyperparameter preset: full, adapter, or large");
  cmd->add_option("--eta", args.eta, "trim keep-ratio in (0, 1]; 1 disables trimming");
  cmd->add_option("--gamma", args.gamma, "scaling factor on the merged delta");
  cmd->add_option("--rank-tol", args.rank_tol, "relative singular-value cutoff");
  cmd->add_option("--solver-tol", args.solver_tol, "relative solver cutoff");
  cmd->add_option("--mode", args.mode, "task-matrix (default) or fine-tuned");
  cmd->add_option("--baseline", args.baseline, "none (default), average, or ta");
  cmd->add_option("--threads", args.threads,
                  "worker threads for per-layer merges (env STFMERGE_THREADS)");
  cmd->add_option("--out-dtype", args.out_dtype, "F32 (default) or F16 output storage");
  cmd->add_flag("--lora", args.lora, "task checkpoints are LoRA adapter files");
  cmd->add_option("--lora-scale", args.lora_scales,
                  "adapter scale, repeat per task (default 1.0)");
}

// Precedence: individual flags > --preset > STFMERGE_THREADS > config file >
// defaults.
stfmerge::CliConfig resolve(const CommonArgs& args) {
  stfmerge::CliConfig config;
  if (!args.config_path.empty()) config = stfmerge::load_cli_config(args.config_path);
  if (!args.preset.empty()) {
    const stfmerge::MergeConfig preset = stfmerge::MergeConfig::preset(args.preset);
    config.merge.eta = preset.eta;
    config.merge.gamma = preset.gamma;
    if (preset.lora_mode) config.merge.lora_mode = true;
  }
  if (const char* env = std::getenv("STFMERGE_THREADS")) {
    try {
      config.merge.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw stfmerge::ConfigError("[cli] STFMERGE_THREADS is not an integer");
    }
  }
  if (!args.base_path.empty()) config.base_path = args.base_path;
  if (!args.task_args.empty()) {
    config.tasks.clear();
    for (const auto& argument : args.task_args)
      config.tasks.push_back(stfmerge::parse_task_argument(argument));
  }
  if (!args.output_path.empty()) config.output_path = args.output_path;
  if (!args.report_path.empty()) config.report_path = args.report_path;
  if (args.eta) config.merge.eta = *args.eta;
  if (args.gamma) config.merge.gamma = *args.gamma;
  if (args.rank_tol) config.merge.rank_tol = *args.rank_tol;
  if (args.solver_tol) config.merge.solver_tol = *args.solver_tol;
  if (args.mode) config.merge.mode = stfmerge::merge_mode_from_name(*args.mode);
  if (args.baseline) config.merge.baseline = stfmerge::baseline_from_name(*args.baseline);
  if (args.threads) config.merge.threads = *args.threads;
  if (args.out_dtype) config.merge.out_dtype = stfmerge::dtype_from_name(*args.out_dtype);
  if (args.lora) config.merge.lora_mode = true;
  if (!args.lora_scales.empty()) {
    if (args.lora_scales.size() != config.tasks.size())
      throw stfmerge::ConfigError("[cli] got " + std::to_string(args.lora_scales.size()) +
                                  " --lora-scale values for " +
                                  std::to_string(config.tasks.size()) + " tasks");
    for (std::size_t t = 0; t < config.tasks.size(); ++t)
      config.tasks[t].lora_scale = args.lora_scales[t];
  }
  if (config.merge.lora_mode) {
    config.merge.lora_scales.clear();
    for (const auto& task : config.tasks) config.merge.lora_scales.push_back(task.lora_scale);
  }
  return config;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw stfmerge::IoError("[cli] cannot open '" + path + "' for writing");
  out << text;
  if (!out.good()) throw stfmerge::IoError("[cli] failed writing '" + path + "'");
}

int run_merge(const CommonArgs& args) {
  stfmerge::CliConfig config = resolve(args);
  if (config.output_path.empty())
    throw stfmerge::ConfigError("[cli] merge needs an output path (--out)");
  stfmerge::CheckpointSet set = stfmerge::open_checkpoint_set(config);
  std::cerr << "merging " << set.tasks.size() << " task checkpoint(s) into '"
            << config.output_path << "'\n";
  stfmerge::MergeReport report =
      config.merge.baseline == stfmerge::BaselineMethod::None
          ? stfmerge::merge_checkpoints(set, config.merge, config.output_path)
          : stfmerge::merge_baseline(set, config.merge, config.output_path);
  if (!config.report_path.empty()) write_text(config.report_path, report.to_json().dump(2) + "\n");
  std::cerr << "merged " << report.layers_merged << " tensors ("
            << report.parameters_touched << " parameters) in " << report.wall_time_seconds
            << "s\n";
  return kExitOk;
}

int run_inspect(const std::string& path, const std::string& config_path) {
  stfmerge::RoleRules rules = stfmerge::RoleRules::defaults();
  if (!config_path.empty()) rules = stfmerge::load_cli_config(config_path).merge.roles;
  stfmerge::CheckpointReader store = stfmerge::CheckpointReader::open(path);
  const auto roles = stfmerge::classify(store, rules);
  std::size_t width = 4;
  for (const auto& name : store.names()) width = std::max(width, name.size());
  std::cout << std::left << std::setw(static_cast<int>(width) + 2) << "name"
            << std::setw(7) << "dtype" << std::setw(18) << "shape" << "role\n";
  for (const auto& name : store.names()) {
    const auto& info = store.info(name);
    std::string shape = "[";
    for (std::size_t i = 0; i < info.shape.size(); ++i)
      shape += (i ? "," : "") + std::to_string(info.shape[i]);
    shape += "]";
    std::cout << std::setw(static_cast<int>(width) + 2) << name << std::setw(7)
              << stfmerge::dtype_name(info.dtype) << std::setw(18) << shape
              << stfmerge::role_name(roles.at(name)) << "\n";
  }
  return kExitOk;
}

int run_preserve_report(const CommonArgs& args, const std::vector<std::string>& methods,
                        const std::string& json_path, const std::string& csv_path) {
  stfmerge::CliConfig config = resolve(args);
  if (methods.empty())
    throw stfmerge::ConfigError("[cli] preserve-report needs at least one --method");
  stfmerge::CheckpointSet set = stfmerge::open_checkpoint_set(config);
  std::vector<std::pair<std::string, stfmerge::MergeConfig>> runs;
  for (const auto& method : methods) {
    if (method != "stf" && method != "average" && method != "ta")
      throw stfmerge::ConfigError("[cli] unknown method '" + method +
                                  "' (expected stf, average, or ta)");
    runs.emplace_back(method, config.merge);
  }
  const auto report = stfmerge::preservation_report(set, runs);
  if (!json_path.empty()) write_text(json_path, report.to_json().dump(2) + "\n");
  if (!csv_path.empty()) write_text(csv_path, report.to_csv());
  for (const auto& aggregate : report.aggregates)
    std::cerr << aggregate.method << ": mean_abs_preservation=" << aggregate.mean_abs_preservation
              << " mean_full_gap=" << aggregate.mean_full_gap << " ("
              << aggregate.triplet_count << " triplets)\n";
  return kExitOk;
}

int run_ablate(const CommonArgs& args, const std::string& target,
               const std::vector<double>& fractions, const std::string& json_path,
               const std::string& csv_path) {
  stfmerge::CliConfig config = resolve(args);
  stfmerge::CheckpointSet set = stfmerge::open_checkpoint_set(config);
  const auto report = stfmerge::ablation_report(
      set, config.merge, stfmerge::ablation_target_from_name(target), fractions);
  if (!json_path.empty()) write_text(json_path, report.to_json().dump(2) + "\n");
  if (!csv_path.empty()) write_text(csv_path, report.to_csv());
  for (const auto& row : report.aggregates)
    std::cerr << "remove " << row.target << " " << row.fraction
              << ": mean_reconstruction_error=" << row.reconstruction_error << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"merge fine-tuned checkpoints by superposing task-specific features"};
  app.require_subcommand(1);

  CommonArgs merge_args;
  CLI::App* merge_cmd = app.add_subcommand("merge", "merge checkpoints into one");
  add_common_flags(merge_cmd, merge_args, /*with_output=*/true);

  std::string inspect_path;
  std::string inspect_config;
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "list tensors and inferred roles");
  inspect_cmd->add_option("path", inspect_path, "checkpoint file")->required();
  inspect_cmd->add_option("--config", inspect_config, "JSON config supplying role rules");

  CommonArgs preserve_args;
  std::vector<std::string> preserve_methods;
  std::string preserve_json = "preservation.json";
  std::string preserve_csv = "preservation.csv";
  CLI::App* preserve_cmd =
      app.add_subcommand("preserve-report", "compare feature preservation across methods");
  add_common_flags(preserve_cmd, preserve_args, /*with_output=*/false);
  preserve_cmd->add_option("--method", preserve_methods, "stf, average, or ta; repeatable")
      ->delimiter(',');
  preserve_cmd->add_option("--out-json", preserve_json, "aggregate JSON path");
  preserve_cmd->add_option("--out-csv", preserve_csv, "per-layer CSV path");

  CommonArgs ablate_args;
  std::string ablate_target = "smallest";
  std::vector<double> ablate_fractions;
  std::string ablate_json = "ablation.json";
  std::string ablate_csv = "ablation.csv";
  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "measure the cost of dropping singular triplets");
  add_common_flags(ablate_cmd, ablate_args, /*with_output=*/false);
  ablate_cmd->add_option("--target", ablate_target, "smallest or largest");
  ablate_cmd->add_option("--fraction", ablate_fractions, "fraction to remove; repeatable")
      ->delimiter(',');
  ablate_cmd->add_option("--out-json", ablate_json, "aggregate JSON path");
  ablate_cmd->add_option("--out-csv", ablate_csv, "per-layer CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (merge_cmd->parsed()) return run_merge(merge_args);
    if (inspect_cmd->parsed()) return run_inspect(inspect_path, inspect_config);
    if (preserve_cmd->parsed())
      return run_preserve_report(preserve_args, preserve_methods, preserve_json, preserve_csv);
    if (ablate_cmd->parsed()) {
      if (ablate_fractions.empty()) ablate_fractions = {0.5};
      return run_ablate(ablate_args, ablate_target, ablate_fractions, ablate_json, ablate_csv);
    }
  } catch (const stfmerge::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const stfmerge::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const stfmerge::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  }
  return kExitConfig;
}
