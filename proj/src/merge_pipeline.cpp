// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#include "stfmerge/merge_pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <thread>
#include <utility>

#include "stfmerge/stf_core.hpp"

namespace stfmerge {

namespace {

using RowMajorXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<double> to_doubles(const std::vector<float>& values) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i];
  return out;
}

std::vector<float> to_floats(const std::vector<double>& values) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i]);
  return out;
}

MatrixX<double> to_matrix(const std::vector<double>& flat, Index rows, Index cols) {
  return Eigen::Map<const RowMajorXd>(flat.data(), rows, cols);
}

std::vector<double> from_matrix(const MatrixX<double>& matrix) {
  std::vector<double> flat(static_cast<std::size_t>(matrix.size()));
  Eigen::Map<RowMajorXd>(flat.data(), matrix.rows(), matrix.cols()) = matrix;
  return flat;
}

double lora_scale_for(const MergeConfig& config, std::size_t task) {
  if (config.lora_scales.empty()) return 1.0;
  return config.lora_scales.at(task);
}

// Trimming silently zeroes entries it cannot order, so non-finite values
// must be caught before it runs.
void ensure_finite(const std::vector<double>& values, const std::string& tensor,
                   const std::string& owner) {
  for (double value : values)
    if (!std::isfinite(value))
      throw NumericError("[merge_pipeline] tensor '" + tensor + "' in " + owner +
                         " has non-finite values");
}

// Adapter tensors "<prefix>.lora_A<suffix>" pair with the matching lora_B
// tensor; the merge target is the name with the lora_A segment removed (and
// ".weight" appended when that is what the base checkpoint calls it).
std::map<std::string, std::pair<std::string, std::string>> resolve_lora_targets(
    const CheckpointReader& adapter, const CheckpointReader& base,
    const std::string& strip_prefix) {
  std::map<std::string, std::pair<std::string, std::string>> targets;
  for (const auto& name : adapter.names()) {
    const auto pos = name.find(".lora_A");
    if (pos == std::string::npos) continue;
    // ".lora_A" must be a whole path segment, not a prefix of a longer one.
    if (pos + 7 < name.size() && name[pos + 7] != '.') continue;
    std::string b_name = name;
    b_name.replace(pos, 7, ".lora_B");
    if (!adapter.contains(b_name))
      throw SchemaError("[merge_pipeline] adapter tensor '" + name +
                        "' has no matching lora_B factor");
    std::string target = name;
    target.erase(pos, 7);
    if (!strip_prefix.empty() && target.rfind(strip_prefix, 0) == 0)
      target = target.substr(strip_prefix.size());
    if (!base.contains(target)) {
      if (base.contains(target + ".weight")) {
        target += ".weight";
      } else {
        throw SchemaError("[merge_pipeline] cannot resolve adapter tensor '" + name +
                          "' to a base tensor");
      }
    }
    if (!targets.emplace(target, std::make_pair(name, b_name)).second)
      throw SchemaError("[merge_pipeline] two adapter pairs target base tensor '" + target + "'");
  }
  return targets;
}

struct Slot {
  bool is_raw = false;
  TensorRecord record;
  RawTensor raw;
  LayerReport report;
};

void run_indexed(std::size_t count, int threads,
                 const std::function<void(std::size_t)>& work) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        work(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(threads, static_cast<int>(count));
  pool.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& thread : pool) thread.join();
  for (auto& error : errors)
    if (error) std::rethrow_exception(error);
}

}  // namespace

std::string merge_mode_name(MergeMode mode) {
  return mode == MergeMode::TaskMatrix ? "task-matrix" : "fine-tuned";
}

MergeMode merge_mode_from_name(const std::string& name) {
  if (name == "task-matrix") return MergeMode::TaskMatrix;
  if (name == "fine-tuned") return MergeMode::FineTunedMatrix;
  throw ConfigError("[merge_pipeline] unknown mode '" + name +
                    "' (expected task-matrix or fine-tuned)");
}

std::string baseline_name(BaselineMethod baseline) {
  switch (baseline) {
    case BaselineMethod::None:
      return "none";
    case BaselineMethod::Average:
      return "average";
    case BaselineMethod::TaskArithmetic:
      return "ta";
  }
  return "none";
}

BaselineMethod baseline_from_name(const std::string& name) {
  if (name == "none") return BaselineMethod::None;
  if (name == "average") return BaselineMethod::Average;
  if (name == "ta" || name == "task-arithmetic") return BaselineMethod::TaskArithmetic;
  throw ConfigError("[merge_pipeline] unknown baseline '" + name +
                    "' (expected none, average, or ta)");
}

void MergeConfig::validate(std::size_t task_count) const {
  if (!(eta > 0.0) || eta > 1.0)
    throw ConfigError("[merge_pipeline] eta must lie in (0, 1], got " + std::to_string(eta));
  if (!(gamma >= 0.0) || !std::isfinite(gamma))
    throw ConfigError("[merge_pipeline] gamma must be a finite non-negative value, got " +
                      std::to_string(gamma));
  if (rank_tol < 0.0 || rank_tol >= 1.0)
    throw ConfigError("[merge_pipeline] rank_tol must lie in [0, 1), got " +
                      std::to_string(rank_tol));
  if (solver_tol < 0.0 || !std::isfinite(solver_tol))
    throw ConfigError("[merge_pipeline] solver_tol must be non-negative, got " +
                      std::to_string(solver_tol));
  if (threads < 1)
    throw ConfigError("[merge_pipeline] thread count must be at least 1, got " +
                      std::to_string(threads));
  if (!lora_scales.empty() && lora_scales.size() != task_count)
    throw ConfigError("[merge_pipeline] got " + std::to_string(lora_scales.size()) +
                      " lora scales for " + std::to_string(task_count) + " tasks");
  if (lora_mode && mode == MergeMode::FineTunedMatrix)
    throw ConfigError("[merge_pipeline] fine-tuned mode does not apply to LoRA adapters");
}

MergeConfig MergeConfig::preset(const std::string& name) {
  MergeConfig config;
  if (name == "full") {
    config.eta = 0.2;
    config.gamma = 0.8;
  } else if (name == "adapter") {
    config.eta = 0.3;
    config.gamma = 0.5;
    config.lora_mode = true;
  } else if (name == "large") {
    config.eta = 1.0;  // trimming disabled
    config.gamma = 0.8;
  } else {
    throw ConfigError("[merge_pipeline] unknown preset '" + name +
                      "' (expected full, adapter, or large)");
  }
  return config;
}

nlohmann::json MergeConfig::to_json() const {
  nlohmann::json roles_json = nlohmann::json::array();
  for (const auto& rule : roles.rules)
    roles_json.push_back({{"pattern", rule.pattern}, {"role", role_name(rule.role)}});
  return {
      {"eta", eta},
      {"gamma", gamma},
      {"rank_tol", rank_tol},
      {"solver_tol", solver_tol},
      {"mode", merge_mode_name(mode)},
      {"baseline", baseline_name(baseline)},
      {"threads", threads},
      {"lora_mode", lora_mode},
      {"lora_scales", lora_scales},
      {"out_dtype", dtype_name(out_dtype)},
      {"roles",
       {{"rules", roles_json},
        {"default_2d", role_name(roles.default_2d)},
        {"default_other", role_name(roles.default_other)}}},
  };
}

nlohmann::json MergeReport::to_json() const {
  nlohmann::json layer_rows = nlohmann::json::array();
  for (const auto& layer : layers) {
    layer_rows.push_back({
        {"name", layer.name},
        {"role", role_name(layer.role)},
        {"parameters", layer.parameters},
        {"retained_rank", layer.retained_rank},
        {"solve_residual", layer.solve_residual},
        {"superposition_residual_max", layer.superposition_residual_max},
    });
  }
  return {
      {"layers", layer_rows},
      {"totals",
       {{"layers_merged", layers_merged},
        {"parameters_touched", parameters_touched},
        {"wall_time_seconds", wall_time_seconds}}},
      {"config", config_echo},
      {"notes", notes},
  };
}

void validate_checkpoint_set(const CheckpointSet& set, const MergeConfig& config) {
  if (set.tasks.empty())
    throw ConfigError("[merge_pipeline] need at least one task checkpoint");
  if (set.task_ids.size() != set.tasks.size())
    throw ConfigError("[merge_pipeline] got " + std::to_string(set.task_ids.size()) +
                      " task ids for " + std::to_string(set.tasks.size()) + " task checkpoints");
  if (config.lora_mode) return;  // adapter stores carry factors, not full tensors
  const auto roles = classify(set.base, config.roles);
  for (const auto& name : set.base.names()) {
    if (roles.at(name) == ParamRole::Ignore) continue;
    const auto& base_info = set.base.info(name);
    for (std::size_t t = 0; t < set.tasks.size(); ++t) {
      if (!set.tasks[t].contains(name))
        throw SchemaError("[merge_pipeline] task '" + set.task_ids[t] +
                          "' is missing tensor '" + name + "'");
      if (set.tasks[t].info(name).shape != base_info.shape)
        throw ShapeError("[merge_pipeline] task '" + set.task_ids[t] + "' tensor '" + name +
                         "' has a different shape than the base checkpoint");
    }
  }
}

MergeReport merge_checkpoints(const CheckpointSet& set, const MergeConfig& config,
                              const std::filesystem::path& output_path) {
  const auto start = std::chrono::steady_clock::now();
  config.validate(set.tasks.size());
  validate_checkpoint_set(set, config);

  const auto roles = classify(set.base, config.roles);
  const auto& names = set.base.names();
  const std::size_t task_count = set.tasks.size();

  // LoRA target resolution is cheap and read-only; do it up front.
  std::vector<std::map<std::string, std::pair<std::string, std::string>>> adapter_targets;
  if (config.lora_mode) {
    adapter_targets.reserve(task_count);
    for (const auto& task : set.tasks)
      adapter_targets.push_back(resolve_lora_targets(task, set.base, config.lora_strip_prefix));
  }

  std::vector<Slot> slots(names.size());

  auto merge_one = [&](std::size_t idx) {
    const std::string& name = names[idx];
    const ParamRole role = roles.at(name);
    Slot& slot = slots[idx];
    slot.report.name = name;
    slot.report.role = role;
    slot.report.parameters = set.base.info(name).numel();

    if (role == ParamRole::Ignore) {
      slot.is_raw = true;
      slot.raw = set.base.read_raw(name);
      return;
    }

    const TensorRecord base = set.base.read(name);
    std::vector<double> base_values = to_doubles(base.data);
    ensure_finite(base_values, name, "the base checkpoint");

    if (role == ParamRole::LinearMatrix) {
      const Index rows = base.shape[0];
      const Index cols = base.shape[1];
      std::vector<SvdBundle<double>> bundles;
      bundles.reserve(task_count);
      // One task matrix resident at a time; only its SVD bundle is kept.
      for (std::size_t t = 0; t < task_count; ++t) {
        std::vector<double> values;
        if (config.lora_mode) {
          const auto it = adapter_targets[t].find(name);
          if (it == adapter_targets[t].end()) continue;  // no adapter for this layer
          const TensorRecord a = set.tasks[t].read(it->second.first);
          const TensorRecord b = set.tasks[t].read(it->second.second);
          TensorRecord delta = materialize_lora_delta(a, b, lora_scale_for(config, t));
          if (delta.shape != base.shape)
            throw ShapeError("[merge_pipeline] adapter for '" + name + "' in task '" +
                             set.task_ids[t] + "' produces a " +
                             std::to_string(delta.shape[0]) + "x" +
                             std::to_string(delta.shape[1]) + " delta");
          values = to_doubles(delta.data);
        } else {
          const TensorRecord task = set.tasks[t].read(name);
          values = to_doubles(task.data);
          if (config.mode == MergeMode::TaskMatrix)
            for (std::size_t i = 0; i < values.size(); ++i) values[i] -= base_values[i];
        }
        ensure_finite(values, name, "task '" + set.task_ids[t] + "'");
        trim_in_place(std::span<double>(values), config.eta);
        auto bundle = truncated_svd<double>(to_matrix(values, rows, cols), config.rank_tol);
        bundle.task_id = set.task_ids[t];
        bundles.push_back(std::move(bundle));
      }

      auto merged = merge_bundles<double>(name, bundles, rows, cols, config.solver_tol);
      slot.report.retained_rank = merged.system.size();
      slot.report.solve_residual = merged.system.residual_norm;
      for (const auto& residual : superposition_residuals(merged, bundles))
        slot.report.superposition_residual_max =
            std::max(slot.report.superposition_residual_max, std::abs(residual.residual));

      std::vector<double> out = from_matrix(merged.delta);
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= config.gamma;
        if (config.mode == MergeMode::TaskMatrix) out[i] += base_values[i];
      }
      slot.record = TensorRecord{name, base.shape, to_floats(out), Dtype::F32};
      return;
    }

    // Task-vector roles: normalization deltas are averaged, bias/embedding
    // deltas are summed and scaled. In LoRA mode adapters carry no such
    // tensors, so the base values pass through.
    std::vector<double> accumulated(base_values.size(), 0.0);
    std::size_t contributions = 0;
    if (!config.lora_mode) {
      for (std::size_t t = 0; t < task_count; ++t) {
        const TensorRecord task = set.tasks[t].read(name);
        std::vector<double> tau = to_doubles(task.data);
        for (std::size_t i = 0; i < tau.size(); ++i) tau[i] -= base_values[i];
        ensure_finite(tau, name, "task '" + set.task_ids[t] + "'");
        trim_in_place(std::span<double>(tau), config.eta);
        for (std::size_t i = 0; i < tau.size(); ++i) accumulated[i] += tau[i];
        ++contributions;
      }
    }
    std::vector<double> out = base_values;
    if (contributions > 0) {
      const double factor = role == ParamRole::Normalization
                                ? 1.0 / static_cast<double>(contributions)
                                : config.gamma;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += factor * accumulated[i];
    }
    slot.record = TensorRecord{name, base.shape, to_floats(out), Dtype::F32};
  };

  run_indexed(names.size(), config.threads, merge_one);

  CheckpointWriter writer(output_path);
  MergeReport report;
  report.config_echo = config.to_json();
  report.notes = {
      "task vectors are deltas against the pre-trained checkpoint; merged deltas are "
      "added back onto the pre-trained values (normalization: mean of deltas; "
      "bias/embedding: gamma-scaled sum of deltas)"};
  for (auto& slot : slots) {
    if (slot.is_raw)
      writer.add_raw(std::move(slot.raw));
    else
      writer.add(std::move(slot.record), config.out_dtype);
    if (slot.report.role != ParamRole::Ignore) {
      ++report.layers_merged;
      report.parameters_touched += slot.report.parameters;
    }
    report.layers.push_back(std::move(slot.report));
  }
  writer.finalize();
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

MergeReport merge_baseline(const CheckpointSet& set, const MergeConfig& config,
                           const std::filesystem::path& output_path) {
  const auto start = std::chrono::steady_clock::now();
  if (config.baseline == BaselineMethod::None)
    throw ConfigError("[merge_pipeline] merge_baseline needs baseline average or ta");
  config.validate(set.tasks.size());
  if (config.lora_mode)
    throw ConfigError("[merge_pipeline] baselines operate on full checkpoints, not adapters");
  validate_checkpoint_set(set, config);

  const auto roles = classify(set.base, config.roles);
  const auto& names = set.base.names();
  const double task_count = static_cast<double>(set.tasks.size());

  std::vector<Slot> slots(names.size());
  auto merge_one = [&](std::size_t idx) {
    const std::string& name = names[idx];
    Slot& slot = slots[idx];
    slot.report.name = name;
    slot.report.role = roles.at(name);
    slot.report.parameters = set.base.info(name).numel();
    if (slot.report.role == ParamRole::Ignore) {
      slot.is_raw = true;
      slot.raw = set.base.read_raw(name);
      return;
    }
    const TensorRecord base = set.base.read(name);
    std::vector<double> out = config.baseline == BaselineMethod::Average
                                  ? std::vector<double>(base.data.size(), 0.0)
                                  : to_doubles(base.data);
    for (std::size_t t = 0; t < set.tasks.size(); ++t) {
      const TensorRecord task = set.tasks[t].read(name);
      if (config.baseline == BaselineMethod::Average) {
        for (std::size_t i = 0; i < out.size(); ++i)
          out[i] += static_cast<double>(task.data[i]) / task_count;
      } else {
        for (std::size_t i = 0; i < out.size(); ++i)
          out[i] += config.gamma * (static_cast<double>(task.data[i]) - base.data[i]);
      }
    }
    slot.record = TensorRecord{name, base.shape, to_floats(out), Dtype::F32};
  };
  run_indexed(names.size(), config.threads, merge_one);

  CheckpointWriter writer(output_path);
  MergeReport report;
  report.config_echo = config.to_json();
  report.notes = {"baseline merge: " + baseline_name(config.baseline)};
  for (auto& slot : slots) {
    if (slot.is_raw)
      writer.add_raw(std::move(slot.raw));
    else
      writer.add(std::move(slot.record), config.out_dtype);
    if (slot.report.role != ParamRole::Ignore) {
      ++report.layers_merged;
      report.parameters_touched += slot.report.parameters;
    }
    report.layers.push_back(std::move(slot.report));
  }
  writer.finalize();
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace stfmerge
