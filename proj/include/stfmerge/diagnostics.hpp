// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Feature-preservation measurement and the singular-vector-removal ablation.
// Preservation is measured on the unscaled merged task matrix: for every
// retained triplet, |<sigma u, M v - sigma u>| quantifies how much of the
// task-specific output feature the merged matrix loses; the full gap
// ||M v - sigma u|| is reported alongside because the inner product only
// constrains the component along u.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stfmerge/linalg.hpp"
#include "stfmerge/merge_pipeline.hpp"
#include "stfmerge/tensor_store.hpp"

namespace stfmerge {

struct PreservationRecord {
  std::string method;
  std::string layer_name;
  std::string task_id;
  double mean_abs_preservation = 0;  // mean over triplets of |<sigma u, M v - sigma u>|
  double mean_full_gap = 0;          // mean over triplets of ||M v - sigma u||_2
  std::int64_t triplet_count = 0;
};

enum class AblationTarget { Smallest, Largest };

std::string ablation_target_name(AblationTarget target);
AblationTarget ablation_target_from_name(const std::string& name);

struct AblationSpec {
  AblationTarget target = AblationTarget::Smallest;
  double remove_fraction = 0;  // in [0, 1)
};

/// Per-task preservation of `merged_delta` against the task features in
/// `bundles`. The merged delta must be the unscaled merged task matrix.
template <class Scalar>
std::vector<PreservationRecord> preservation(const MatrixX<Scalar>& merged_delta,
                                             const std::vector<SvdBundle<Scalar>>& bundles,
                                             const std::string& method) {
  std::vector<PreservationRecord> records;
  records.reserve(bundles.size());
  for (const auto& bundle : bundles) {
    if (bundle.rank() > 0 &&
        (bundle.source_rows != merged_delta.rows() || bundle.source_cols != merged_delta.cols()))
      throw ShapeError("[diagnostics] bundle shape differs from merged delta shape");
    PreservationRecord record;
    record.method = method;
    record.task_id = bundle.task_id;
    record.triplet_count = bundle.rank();
    for (Index k = 0; k < bundle.rank(); ++k) {
      const Scalar sigma = bundle.sigmas(k);
      const VectorX<Scalar> gap = merged_delta * bundle.right.col(k) - sigma * bundle.left.col(k);
      record.mean_abs_preservation +=
          std::abs(static_cast<double>((sigma * bundle.left.col(k)).dot(gap)));
      record.mean_full_gap += static_cast<double>(gap.norm());
    }
    if (bundle.rank() > 0) {
      record.mean_abs_preservation /= static_cast<double>(bundle.rank());
      record.mean_full_gap /= static_cast<double>(bundle.rank());
    }
    records.push_back(std::move(record));
  }
  return records;
}

/// Drops floor(remove_fraction * r) triplets from the small or large end of
/// the spectrum; the remaining bundle is still a valid truncated SVD.
template <class Scalar>
SvdBundle<Scalar> ablate_singulars(const SvdBundle<Scalar>& bundle, const AblationSpec& spec) {
  if (spec.remove_fraction < 0.0 || spec.remove_fraction >= 1.0)
    throw ConfigError("[diagnostics] remove fraction must lie in [0, 1), got " +
                      std::to_string(spec.remove_fraction));
  const Index drop =
      static_cast<Index>(std::floor(spec.remove_fraction * static_cast<double>(bundle.rank())));
  if (drop == 0) return bundle;
  const Index kept = bundle.rank() - drop;
  const Index first = spec.target == AblationTarget::Largest ? drop : 0;
  SvdBundle<Scalar> out;
  out.task_id = bundle.task_id;
  out.source_rows = bundle.source_rows;
  out.source_cols = bundle.source_cols;
  out.sigmas = bundle.sigmas.segment(first, kept);
  out.left = bundle.left.middleCols(first, kept);
  out.right = bundle.right.middleCols(first, kept);
  return out;
}

/// Preservation comparison across merging methods, aggregated per method with
/// per-(layer, task) rows retained.
struct PreservationReport {
  struct Aggregate {
    std::string method;
    double mean_abs_preservation = 0;
    double mean_full_gap = 0;
    std::int64_t triplet_count = 0;
    std::int64_t layer_count = 0;
  };
  std::vector<PreservationRecord> rows;
  std::vector<Aggregate> aggregates;  // in method input order

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Runs every (method, config) pair unscaled over the set's linear layers and
/// measures preservation against the task features of the raw (untrimmed)
/// deltas. Methods: "stf", "average", "ta".
PreservationReport preservation_report(
    const CheckpointSet& set, const std::vector<std::pair<std::string, MergeConfig>>& methods);

/// Reconstruction cost of dropping singular triplets before merging, relative
/// to the full merge of the same layer.
struct AblationReport {
  struct Row {
    std::string target;
    double fraction = 0;
    std::string layer_name;
    double reconstruction_error = 0;  // ||M_ablated - M_full||_F / ||M_full||_F
  };
  std::vector<Row> rows;        // per (fraction, layer)
  std::vector<Row> aggregates;  // per fraction, layer_name empty, mean error

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

AblationReport ablation_report(const CheckpointSet& set, const MergeConfig& config,
                               AblationTarget target, const std::vector<double>& fractions);

}  // namespace stfmerge
