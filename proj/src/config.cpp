// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#include "stfmerge/config.hpp"

#include <fstream>

#include <json.hpp>

namespace stfmerge {

using json = nlohmann::json;

namespace {

std::string default_task_id(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

RoleRules parse_roles(const json& section) {
  RoleRules rules = RoleRules::defaults();
  std::vector<RoleRule> custom;
  if (section.contains("rules")) {
    for (const auto& entry : section.at("rules")) {
      if (!entry.is_object() || !entry.contains("pattern") || !entry.contains("role"))
        throw ConfigError("[config] each role rule needs a pattern and a role");
      custom.push_back({entry.at("pattern").get<std::string>(),
                        role_from_name(entry.at("role").get<std::string>())});
    }
  }
  const bool keep_defaults = section.value("use_defaults", true);
  if (!keep_defaults) rules.rules.clear();
  // Custom rules take precedence: first match wins.
  rules.rules.insert(rules.rules.begin(), custom.begin(), custom.end());
  if (section.contains("default_2d"))
    rules.default_2d = role_from_name(section.at("default_2d").get<std::string>());
  if (section.contains("default_other"))
    rules.default_other = role_from_name(section.at("default_other").get<std::string>());
  return rules;
}

}  // namespace

TaskSpec parse_task_argument(const std::string& argument) {
  TaskSpec spec;
  const auto eq = argument.find('=');
  if (eq != std::string::npos && eq > 0) {
    spec.id = argument.substr(0, eq);
    spec.path = argument.substr(eq + 1);
  } else {
    spec.path = argument;
    spec.id = default_task_id(argument);
  }
  if (spec.path.empty()) throw ConfigError("[config] task argument '" + argument + "' has no path");
  return spec;
}

CliConfig load_cli_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("[config] cannot open config file '" + path.string() + "'");
  json doc = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded() || !doc.is_object())
    throw ConfigError("[config] '" + path.string() + "' is not a JSON object");

  CliConfig config;
  try {
    if (doc.contains("preset")) config.merge = MergeConfig::preset(doc.at("preset").get<std::string>());
    if (doc.contains("base")) config.base_path = doc.at("base").get<std::string>();
    if (doc.contains("output")) config.output_path = doc.at("output").get<std::string>();
    if (doc.contains("report")) config.report_path = doc.at("report").get<std::string>();
    if (doc.contains("tasks")) {
      for (const auto& entry : doc.at("tasks")) {
        TaskSpec spec;
        if (entry.is_string()) {
          spec = parse_task_argument(entry.get<std::string>());
        } else if (entry.is_object()) {
          spec.path = entry.at("path").get<std::string>();
          spec.id = entry.value("id", default_task_id(spec.path));
          spec.lora_scale = entry.value("lora_scale", 1.0);
        } else {
          throw ConfigError("[config] task entries must be strings or objects");
        }
        config.tasks.push_back(std::move(spec));
      }
    }
    if (doc.contains("eta")) config.merge.eta = doc.at("eta").get<double>();
    if (doc.contains("gamma")) config.merge.gamma = doc.at("gamma").get<double>();
    if (doc.contains("rank_tol")) config.merge.rank_tol = doc.at("rank_tol").get<double>();
    if (doc.contains("solver_tol")) config.merge.solver_tol = doc.at("solver_tol").get<double>();
    if (doc.contains("mode"))
      config.merge.mode = merge_mode_from_name(doc.at("mode").get<std::string>());
    if (doc.contains("baseline"))
      config.merge.baseline = baseline_from_name(doc.at("baseline").get<std::string>());
    if (doc.contains("threads")) config.merge.threads = doc.at("threads").get<int>();
    if (doc.contains("out_dtype"))
      config.merge.out_dtype = dtype_from_name(doc.at("out_dtype").get<std::string>());
    if (doc.contains("lora")) {
      const auto& lora = doc.at("lora");
      config.merge.lora_mode = lora.value("enabled", true);
      if (lora.contains("strip_prefix"))
        config.merge.lora_strip_prefix = lora.at("strip_prefix").get<std::string>();
    }
    if (doc.contains("roles")) config.merge.roles = parse_roles(doc.at("roles"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("[config] ") + path.string() + ": " + e.what());
  }
  return config;
}

CheckpointSet open_checkpoint_set(const CliConfig& config) {
  if (config.base_path.empty()) throw ConfigError("[config] no base checkpoint given");
  if (config.tasks.empty()) throw ConfigError("[config] no task checkpoints given");
  CheckpointSet set;
  set.base = CheckpointReader::open(config.base_path);
  for (const auto& task : config.tasks) {
    set.tasks.push_back(CheckpointReader::open(task.path));
    set.task_ids.push_back(task.id);
  }
  return set;
}

}  // namespace stfmerge
