// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stfmerge/merge_pipeline.hpp"
#include "stfmerge/tensor_store.hpp"

namespace stfmerge {

struct TaskSpec {
  std::string path;
  std::string id;
  double lora_scale = 1.0;
};

/// Everything the command line drives: checkpoint paths plus the merge
/// configuration. Command-line flags override config-file values.
struct CliConfig {
  std::string base_path;
  std::vector<TaskSpec> tasks;
  std::string output_path;
  std::string report_path;
  MergeConfig merge;
};

/// Loads a JSON config document. Recognized keys: base, tasks (path strings
/// or {path, id, lora_scale} objects), output, report, eta, gamma, rank_tol,
/// solver_tol, mode, baseline, threads, out_dtype, preset, lora {enabled,
/// strip_prefix}, roles {rules: [{pattern, role}], default_2d, default_other,
/// use_defaults}. Custom role rules are matched before the shipped defaults
/// unless use_defaults is false, which drops the defaults entirely.
CliConfig load_cli_config(const std::filesystem::path& path);

/// Parses a "--task" argument of the form "path" or "id=path".
TaskSpec parse_task_argument(const std::string& argument);

/// Opens base and task stores for a resolved CliConfig.
CheckpointSet open_checkpoint_set(const CliConfig& config);

}  // namespace stfmerge
