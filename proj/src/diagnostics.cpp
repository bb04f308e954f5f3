// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#include "stfmerge/diagnostics.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "stfmerge/stf_core.hpp"

namespace stfmerge {

namespace {

using RowMajorXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatrixX<double> read_matrix(const CheckpointReader& store, const std::string& name) {
  const TensorRecord record = store.read(name);
  if (record.shape.size() != 2)
    throw ShapeError("[diagnostics] tensor '" + name + "' is not a matrix");
  return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
             record.data.data(), record.shape[0], record.shape[1])
      .cast<double>();
}

std::vector<std::string> linear_layer_names(const CheckpointSet& set, const RoleRules& rules) {
  const auto roles = classify(set.base, rules);
  std::vector<std::string> names;
  for (const auto& [name, role] : roles)
    if (role == ParamRole::LinearMatrix) names.push_back(name);
  return names;
}

MatrixX<double> trimmed(MatrixX<double> delta, double eta) {
  if (eta >= 1.0) return delta;
  // Trimming is defined on the row-major flat buffer.
  RowMajorXd row_major = delta;
  trim_in_place(std::span<double>(row_major.data(), static_cast<std::size_t>(row_major.size())),
                eta);
  return row_major;
}

// The unscaled merged task matrix for one method: the merged linear weight at
// gamma = 1, minus the pre-trained weight.
MatrixX<double> merged_task_matrix(const std::string& method, const MergeConfig& config,
                                   const MatrixX<double>& base,
                                   const std::vector<MatrixX<double>>& task_weights,
                                   const std::vector<std::string>& task_ids) {
  if (method == "average") {
    MatrixX<double> mean = MatrixX<double>::Zero(base.rows(), base.cols());
    for (const auto& weight : task_weights) mean += weight;
    mean /= static_cast<double>(task_weights.size());
    return mean - base;
  }
  if (method == "ta") {
    MatrixX<double> sum = MatrixX<double>::Zero(base.rows(), base.cols());
    for (const auto& weight : task_weights) sum += weight - base;
    return sum;
  }
  if (method == "stf") {
    std::vector<SvdBundle<double>> bundles;
    bundles.reserve(task_weights.size());
    for (std::size_t t = 0; t < task_weights.size(); ++t) {
      const MatrixX<double> matrix =
          config.mode == MergeMode::TaskMatrix
              ? trimmed(task_weights[t] - base, config.eta)
              : trimmed(task_weights[t], config.eta);
      auto bundle = truncated_svd<double>(matrix, config.rank_tol);
      bundle.task_id = task_ids[t];
      bundles.push_back(std::move(bundle));
    }
    const auto merged =
        merge_bundles<double>("", bundles, base.rows(), base.cols(), config.solver_tol);
    if (config.mode == MergeMode::TaskMatrix) return merged.delta;
    return merged.delta - base;  // merged fine-tuned weight, re-expressed as a delta
  }
  throw ConfigError("[diagnostics] unknown method '" + method +
                    "' (expected stf, average, or ta)");
}

}  // namespace

std::string ablation_target_name(AblationTarget target) {
  return target == AblationTarget::Smallest ? "smallest" : "largest";
}

AblationTarget ablation_target_from_name(const std::string& name) {
  if (name == "smallest") return AblationTarget::Smallest;
  if (name == "largest") return AblationTarget::Largest;
  throw ConfigError("[diagnostics] unknown ablation target '" + name +
                    "' (expected smallest or largest)");
}

nlohmann::json PreservationReport::to_json() const {
  nlohmann::json aggregate_rows = nlohmann::json::array();
  for (const auto& aggregate : aggregates) {
    aggregate_rows.push_back({
        {"method", aggregate.method},
        {"mean_abs_preservation", aggregate.mean_abs_preservation},
        {"mean_full_gap", aggregate.mean_full_gap},
        {"triplet_count", aggregate.triplet_count},
        {"layer_count", aggregate.layer_count},
    });
  }
  nlohmann::json row_items = nlohmann::json::array();
  for (const auto& row : rows) {
    row_items.push_back({
        {"method", row.method},
        {"layer", row.layer_name},
        {"task", row.task_id},
        {"mean_abs_preservation", row.mean_abs_preservation},
        {"mean_full_gap", row.mean_full_gap},
        {"triplet_count", row.triplet_count},
    });
  }
  return {{"methods", aggregate_rows}, {"rows", row_items}};
}

std::string PreservationReport::to_csv() const {
  std::ostringstream out;
  out << "method,layer,task,mean_abs_preservation,mean_full_gap\n";
  out.precision(17);
  for (const auto& row : rows)
    out << row.method << ',' << row.layer_name << ',' << row.task_id << ','
        << row.mean_abs_preservation << ',' << row.mean_full_gap << '\n';
  return out.str();
}

PreservationReport preservation_report(
    const CheckpointSet& set, const std::vector<std::pair<std::string, MergeConfig>>& methods) {
  if (methods.empty())
    throw ConfigError("[diagnostics] preservation report needs at least one method");
  for (const auto& [method, config] : methods) {
    config.validate(set.tasks.size());
    if (config.lora_mode)
      throw ConfigError("[diagnostics] preservation report operates on full checkpoints");
  }
  const MergeConfig& reference = methods.front().second;
  validate_checkpoint_set(set, reference);
  const auto layers = linear_layer_names(set, reference.roles);

  PreservationReport report;
  for (const auto& [method, config] : methods)
    report.aggregates.push_back({method, 0.0, 0.0, 0, 0});

  for (const auto& layer : layers) {
    const MatrixX<double> base = read_matrix(set.base, layer);
    std::vector<MatrixX<double>> task_weights;
    task_weights.reserve(set.tasks.size());
    for (const auto& task : set.tasks) task_weights.push_back(read_matrix(task, layer));

    // Reference features: the singular triplets of the raw task deltas.
    std::vector<SvdBundle<double>> features;
    features.reserve(set.tasks.size());
    for (std::size_t t = 0; t < set.tasks.size(); ++t) {
      auto bundle = truncated_svd<double>(MatrixX<double>(task_weights[t] - base),
                                          reference.rank_tol);
      bundle.task_id = set.task_ids[t];
      features.push_back(std::move(bundle));
    }

    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const auto& [method, config] = methods[mi];
      const MatrixX<double> merged =
          merged_task_matrix(method, config, base, task_weights, set.task_ids);
      for (auto record : preservation(merged, features, method)) {
        record.layer_name = layer;
        auto& aggregate = report.aggregates[mi];
        aggregate.mean_abs_preservation +=
            record.mean_abs_preservation * static_cast<double>(record.triplet_count);
        aggregate.mean_full_gap += record.mean_full_gap * static_cast<double>(record.triplet_count);
        aggregate.triplet_count += record.triplet_count;
        report.rows.push_back(std::move(record));
      }
      report.aggregates[mi].layer_count += 1;
    }
  }
  for (auto& aggregate : report.aggregates) {
    if (aggregate.triplet_count > 0) {
      aggregate.mean_abs_preservation /= static_cast<double>(aggregate.triplet_count);
      aggregate.mean_full_gap /= static_cast<double>(aggregate.triplet_count);
    }
  }
  return report;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json aggregate_rows = nlohmann::json::array();
  for (const auto& row : aggregates) {
    aggregate_rows.push_back({
        {"target", row.target},
        {"fraction", row.fraction},
        {"mean_reconstruction_error", row.reconstruction_error},
    });
  }
  nlohmann::json row_items = nlohmann::json::array();
  for (const auto& row : rows) {
    row_items.push_back({
        {"target", row.target},
        {"fraction", row.fraction},
        {"layer", row.layer_name},
        {"reconstruction_error", row.reconstruction_error},
    });
  }
  return {{"aggregates", aggregate_rows}, {"rows", row_items}};
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out << "target,fraction,layer,reconstruction_error\n";
  out.precision(17);
  for (const auto& row : rows)
    out << row.target << ',' << row.fraction << ',' << row.layer_name << ','
        << row.reconstruction_error << '\n';
  return out.str();
}

AblationReport ablation_report(const CheckpointSet& set, const MergeConfig& config,
                               AblationTarget target, const std::vector<double>& fractions) {
  if (fractions.empty())
    throw ConfigError("[diagnostics] ablation report needs at least one fraction");
  config.validate(set.tasks.size());
  if (config.lora_mode)
    throw ConfigError("[diagnostics] ablation report operates on full checkpoints");
  validate_checkpoint_set(set, config);
  const auto layers = linear_layer_names(set, config.roles);

  AblationReport report;
  std::vector<double> sums(fractions.size(), 0.0);
  for (const auto& layer : layers) {
    const MatrixX<double> base = read_matrix(set.base, layer);
    std::vector<SvdBundle<double>> bundles;
    bundles.reserve(set.tasks.size());
    for (std::size_t t = 0; t < set.tasks.size(); ++t) {
      auto bundle = truncated_svd<double>(trimmed(read_matrix(set.tasks[t], layer) - base,
                                                  config.eta),
                                          config.rank_tol);
      bundle.task_id = set.task_ids[t];
      bundles.push_back(std::move(bundle));
    }
    const auto full = merge_bundles<double>(layer, bundles, base.rows(), base.cols(),
                                            config.solver_tol);
    const double denom = full.delta.norm();

    for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
      AblationSpec spec{target, fractions[fi]};
      std::vector<SvdBundle<double>> ablated;
      ablated.reserve(bundles.size());
      for (const auto& bundle : bundles) ablated.push_back(ablate_singulars(bundle, spec));
      const auto partial = merge_bundles<double>(layer, ablated, base.rows(), base.cols(),
                                                 config.solver_tol);
      const double error = denom > 0 ? (partial.delta - full.delta).norm() / denom : 0.0;
      report.rows.push_back({ablation_target_name(target), fractions[fi], layer, error});
      sums[fi] += error;
    }
  }
  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    const double mean = layers.empty() ? 0.0 : sums[fi] / static_cast<double>(layers.size());
    report.aggregates.push_back({ablation_target_name(target), fractions[fi], "", mean});
  }
  return report;
}

}  // namespace stfmerge
