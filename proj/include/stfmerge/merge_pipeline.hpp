// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stfmerge/errors.hpp"
#include "stfmerge/tensor_store.hpp"

namespace stfmerge {

/// Which matrices enter the per-layer merge: parameter deltas against the
/// pre-trained base (the recommended setting), or the fine-tuned matrices
/// themselves, in which case the base is not added back.
enum class MergeMode { TaskMatrix, FineTunedMatrix };

/// Comparison baselines: elementwise averaging of the fine-tuned checkpoints,
/// or plain task arithmetic (scaled sum of deltas).
enum class BaselineMethod { None, Average, TaskArithmetic };

std::string merge_mode_name(MergeMode mode);
MergeMode merge_mode_from_name(const std::string& name);
std::string baseline_name(BaselineMethod baseline);
BaselineMethod baseline_from_name(const std::string& name);

struct MergeConfig {
  double eta = 0.2;     // keep-ratio for magnitude trimming; 1 disables it
  double gamma = 0.8;   // scaling factor on the merged delta
  double rank_tol = 1e-5;
  double solver_tol = 1e-8;
  MergeMode mode = MergeMode::TaskMatrix;
  BaselineMethod baseline = BaselineMethod::None;
  RoleRules roles = RoleRules::defaults();
  int threads = 1;
  bool lora_mode = false;
  std::vector<double> lora_scales;  // per task; empty means 1.0 everywhere
  std::string lora_strip_prefix = "base_model.model.";
  Dtype out_dtype = Dtype::F32;

  /// Throws ConfigError naming the offending field.
  void validate(std::size_t task_count) const;

  /// Named hyperparameter presets: "full" (eta 0.2, gamma 0.8), "adapter"
  /// (eta 0.3, gamma 0.5), "large" (trimming disabled, gamma 0.8).
  static MergeConfig preset(const std::string& name);

  nlohmann::json to_json() const;
};

struct LayerReport {
  std::string name;
  ParamRole role = ParamRole::LinearMatrix;
  std::int64_t parameters = 0;
  std::int64_t retained_rank = 0;
  double solve_residual = 0;
  double superposition_residual_max = 0;  // largest |<sigma u, M v - sigma u>| over triplets
};

struct MergeReport {
  std::vector<LayerReport> layers;
  std::int64_t layers_merged = 0;
  std::int64_t parameters_touched = 0;
  double wall_time_seconds = 0;
  nlohmann::json config_echo;
  std::vector<std::string> notes;

  nlohmann::json to_json() const;
};

/// Keeps the ceil(eta * count) largest-magnitude entries of the flat,
/// row-major buffer, zeroing the rest. Ties at the threshold magnitude keep
/// the lower flat index. Kept values are not rescaled.
template <class Scalar>
void trim_in_place(std::span<Scalar> values, double eta);

/// Full-checkpoint merge: per-tensor role dispatch (superposition merge for
/// linear matrices, mean of deltas for normalization, scaled delta sums for
/// bias/embedding, verbatim copy for ignored tensors), writing the merged
/// checkpoint to `output_path`.
MergeReport merge_checkpoints(const CheckpointSet& set, const MergeConfig& config,
                              const std::filesystem::path& output_path);

/// Baseline merges over every non-ignored tensor, uniform across roles.
MergeReport merge_baseline(const CheckpointSet& set, const MergeConfig& config,
                           const std::filesystem::path& output_path);

/// Checks that every non-ignored base tensor exists with the same shape in
/// every task store (skipped for adapter stores in LoRA mode).
void validate_checkpoint_set(const CheckpointSet& set, const MergeConfig& config);

namespace detail {

inline std::size_t trim_keep_count(double eta, std::size_t count) {
  // eta * count computed in floating point can land a hair above an exact
  // integer; nudge down before taking the ceiling.
  const double exact = eta * static_cast<double>(count);
  const auto keep = static_cast<std::size_t>(std::ceil(exact * (1.0 - 1e-12)));
  return std::min(std::max<std::size_t>(keep, 1), count);
}

}  // namespace detail

template <class Scalar>
void trim_in_place(std::span<Scalar> values, double eta) {
  if (!(eta > 0.0) || eta > 1.0)
    throw ConfigError("[merge_pipeline] eta must lie in (0, 1], got " + std::to_string(eta));
  if (values.empty() || eta == 1.0) return;
  const std::size_t keep = detail::trim_keep_count(eta, values.size());
  if (keep >= values.size()) return;

  std::vector<Scalar> mags(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) mags[i] = std::abs(values[i]);
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(keep - 1), mags.end(),
                   std::greater<Scalar>());
  const Scalar threshold = mags[keep - 1];

  std::size_t above = 0;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (std::abs(values[i]) > threshold) ++above;
  std::size_t ties_left = keep - above;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Scalar mag = std::abs(values[i]);
    if (mag > threshold) continue;
    if (mag == threshold && ties_left > 0) {
      --ties_left;
      continue;
    }
    values[i] = Scalar(0);
  }
}

}  // namespace stfmerge
