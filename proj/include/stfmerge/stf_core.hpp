// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Single-layer merge by task-feature superposition. Each task matrix is
// decomposed into singular triplets; the merged matrix is a weighted sum of
// those triplets, with the weights chosen so that the merged matrix, applied
// to any retained right singular vector, still contains the corresponding
// scaled left singular vector (the residual is orthogonal to it). The weights
// come from one r x r linear system whose coefficients are the elementwise
// product of the left- and right-vector Gram matrices.

#pragma once

#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "stfmerge/linalg.hpp"

namespace stfmerge {

/// One layer's parameter delta for one task.
template <class Scalar>
struct TaskMatrix {
  std::string task_id;
  std::string layer_name;
  MatrixX<Scalar> delta;
};

/// The merged delta for one layer plus the solved system, retained for
/// diagnostics.
template <class Scalar>
struct MergedTaskMatrix {
  std::string layer_name;
  MatrixX<Scalar> delta;
  MergeSystem<Scalar> system;
};

template <class Scalar>
struct TripletResidual {
  std::string task_id;
  Index k = 0;
  Scalar residual = Scalar(0);
};

/// Builds the merging system from SVD bundles. Rows/columns follow the order:
/// bundles in input order, then k ascending within each bundle.
template <class Scalar>
MergeSystem<Scalar> assemble_system(const std::vector<SvdBundle<Scalar>>& bundles) {
  std::vector<MatrixX<Scalar>> lefts;
  std::vector<MatrixX<Scalar>> rights;
  lefts.reserve(bundles.size());
  rights.reserve(bundles.size());
  MergeSystem<Scalar> system;
  Index r = 0;
  for (const auto& bundle : bundles) r += bundle.rank();
  system.rhs.resize(r);
  system.index_map.reserve(static_cast<std::size_t>(r));
  Index at = 0;
  for (const auto& bundle : bundles) {
    lefts.push_back(bundle.left);
    rights.push_back(bundle.right);
    for (Index k = 0; k < bundle.rank(); ++k) {
      system.rhs(at++) = bundle.sigmas(k);
      system.index_map.emplace_back(bundle.task_id, k);
    }
  }
  system.coeff = hadamard(gram(lefts, lefts), gram(rights, rights));
  return system;
}

/// Weighted recomposition over all retained triplets, accumulated in bundle
/// order.
template <class Scalar>
MatrixX<Scalar> recompose(const std::vector<SvdBundle<Scalar>>& bundles,
                          const VectorX<Scalar>& weights, Index rows, Index cols) {
  Index r = 0;
  for (const auto& bundle : bundles) r += bundle.rank();
  if (weights.size() != r)
    throw ShapeError("[stf_core] got " + std::to_string(weights.size()) +
                     " weights for " + std::to_string(r) + " retained triplets");
  MatrixX<Scalar> merged = MatrixX<Scalar>::Zero(rows, cols);
  Index at = 0;
  for (const auto& bundle : bundles) {
    if (bundle.rank() == 0) continue;
    if (bundle.source_rows != rows || bundle.source_cols != cols)
      throw ShapeError("[stf_core] bundle shape differs from layer shape");
    merged.noalias() +=
        bundle.left * weights.segment(at, bundle.rank()).asDiagonal() * bundle.right.transpose();
    at += bundle.rank();
  }
  return merged;
}

/// Merge pre-decomposed bundles: assemble the system, solve for the weights,
/// recompose. All-zero inputs (total rank 0) yield a zero delta and an empty
/// system.
template <class Scalar>
MergedTaskMatrix<Scalar> merge_bundles(std::string layer_name,
                                       const std::vector<SvdBundle<Scalar>>& bundles,
                                       Index rows, Index cols, Scalar solver_tol) {
  MergedTaskMatrix<Scalar> merged;
  merged.layer_name = std::move(layer_name);
  merged.system = assemble_system(bundles);
  if (merged.system.size() == 0) {
    merged.delta = MatrixX<Scalar>::Zero(rows, cols);
    return merged;
  }
  auto solution = solve_sym(merged.system.coeff, merged.system.rhs, solver_tol);
  merged.system.weights = std::move(solution.weights);
  merged.system.residual_norm = solution.residual_norm;
  merged.delta = recompose(bundles, merged.system.weights, rows, cols);
  return merged;
}

/// Merge one layer's task matrices. With a single task the system is the
/// identity, the weights equal the singular values, and the output
/// reproduces the input delta up to truncation rounding.
template <class Scalar>
MergedTaskMatrix<Scalar> stf_merge(const std::vector<TaskMatrix<Scalar>>& matrices,
                                   Scalar rank_tol, Scalar solver_tol) {
  if (matrices.empty()) throw ShapeError("[stf_core] stf_merge needs at least one task matrix");
  const Index rows = matrices.front().delta.rows();
  const Index cols = matrices.front().delta.cols();
  const std::string& layer = matrices.front().layer_name;
  std::vector<SvdBundle<Scalar>> bundles;
  bundles.reserve(matrices.size());
  for (const auto& matrix : matrices) {
    if (matrix.delta.rows() != rows || matrix.delta.cols() != cols)
      throw ShapeError("[stf_core] task '" + matrix.task_id + "' delta is " +
                       std::to_string(matrix.delta.rows()) + "x" +
                       std::to_string(matrix.delta.cols()) + ", expected " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    if (matrix.layer_name != layer)
      throw ShapeError("[stf_core] task matrices name different layers: '" + layer +
                       "' vs '" + matrix.layer_name + "'");
    auto bundle = truncated_svd(matrix.delta, rank_tol);
    bundle.task_id = matrix.task_id;
    bundles.push_back(std::move(bundle));
  }
  return merge_bundles(layer, bundles, rows, cols, solver_tol);
}

/// Per-triplet superposition residual <sigma u, M v - sigma u>. Zero means the
/// merged matrix reproduces that task-specific output feature exactly.
template <class Scalar>
std::vector<TripletResidual<Scalar>> superposition_residuals(
    const MergedTaskMatrix<Scalar>& merged, const std::vector<SvdBundle<Scalar>>& bundles) {
  std::vector<TripletResidual<Scalar>> residuals;
  for (const auto& bundle : bundles) {
    if (bundle.rank() == 0) continue;
    if (bundle.source_rows != merged.delta.rows() || bundle.source_cols != merged.delta.cols())
      throw ShapeError("[stf_core] bundle shape differs from merged delta shape");
    for (Index k = 0; k < bundle.rank(); ++k) {
      const Scalar sigma = bundle.sigmas(k);
      const VectorX<Scalar> out = merged.delta * bundle.right.col(k);
      const Scalar value =
          (sigma * bundle.left.col(k)).dot(out - sigma * bundle.left.col(k));
      residuals.push_back({bundle.task_id, k, value});
    }
  }
  return residuals;
}

/// Brute-force verification path: rebuilds the merged matrix from the given
/// weights by explicit outer products and evaluates every superposition inner
/// product with plain matrix-vector arithmetic, bypassing the Gram-matrix
/// assembly entirely. Returns the largest absolute residual.
template <class Scalar>
Scalar oracle_check(const std::vector<TaskMatrix<Scalar>>& matrices,
                    const VectorX<Scalar>& weights,
                    Scalar rank_tol = Scalar(kDefaultRankTol)) {
  if (matrices.empty()) throw ShapeError("[stf_core] oracle_check needs at least one task matrix");
  std::vector<SvdBundle<Scalar>> bundles;
  Index r = 0;
  for (const auto& matrix : matrices) {
    auto bundle = truncated_svd(matrix.delta, rank_tol);
    bundle.task_id = matrix.task_id;
    r += bundle.rank();
    bundles.push_back(std::move(bundle));
  }
  if (weights.size() != r)
    throw ShapeError("[stf_core] oracle_check got " + std::to_string(weights.size()) +
                     " weights for " + std::to_string(r) + " retained triplets");

  const Index rows = matrices.front().delta.rows();
  const Index cols = matrices.front().delta.cols();
  MatrixX<Scalar> merged = MatrixX<Scalar>::Zero(rows, cols);
  Index at = 0;
  for (const auto& bundle : bundles)
    for (Index k = 0; k < bundle.rank(); ++k)
      merged += weights(at++) * (bundle.left.col(k) * bundle.right.col(k).transpose());

  Scalar worst = Scalar(0);
  for (const auto& bundle : bundles) {
    for (Index k = 0; k < bundle.rank(); ++k) {
      const Scalar sigma = bundle.sigmas(k);
      VectorX<Scalar> out = VectorX<Scalar>::Zero(rows);
      for (Index j = 0; j < cols; ++j) out += merged.col(j) * bundle.right(j, k);
      Scalar residual = Scalar(0);
      for (Index i = 0; i < rows; ++i)
        residual += sigma * bundle.left(i, k) * (out(i) - sigma * bundle.left(i, k));
      worst = std::max(worst, std::abs(residual));
    }
  }
  return worst;
}

}  // namespace stfmerge
