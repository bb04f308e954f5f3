// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "stfmerge/errors.hpp"

namespace stfmerge {

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

/// Relative cutoff on singular values, measured against the largest one.
inline constexpr double kDefaultRankTol = 1e-5;
/// Relative cutoff below which system singular values are treated as zero.
inline constexpr double kDefaultSolverTol = 1e-8;

/// Truncated SVD of one task matrix: the retained singular triplets
/// (sigma_k, u_k, v_k) with sigma sorted descending and a deterministic sign
/// convention (largest-magnitude entry of each left vector is positive).
template <class Scalar>
struct SvdBundle {
  std::string task_id;
  VectorX<Scalar> sigmas;  // descending, all > rank_tol * sigmas(0)
  MatrixX<Scalar> left;    // m x r, column-orthonormal
  MatrixX<Scalar> right;   // n x r, column-orthonormal
  Index source_rows = 0;
  Index source_cols = 0;

  Index rank() const { return sigmas.size(); }

  /// Sum of sigma_k u_k v_k^T over the retained triplets.
  MatrixX<Scalar> reconstruct() const {
    if (rank() == 0) return MatrixX<Scalar>::Zero(source_rows, source_cols);
    return left * sigmas.asDiagonal() * right.transpose();
  }
};

/// The assembled merging system: coefficient matrix (elementwise product of
/// the left and right Gram matrices), singular-value right-hand side, solved
/// weights, and the (task, k) ordering shared by rows, columns, rhs and
/// weights.
template <class Scalar>
struct MergeSystem {
  MatrixX<Scalar> coeff;
  VectorX<Scalar> rhs;
  VectorX<Scalar> weights;
  std::vector<std::pair<std::string, Index>> index_map;
  Scalar residual_norm = Scalar(0);

  Index size() const { return rhs.size(); }
};

template <class Scalar>
struct LeastSquaresSolution {
  VectorX<Scalar> weights;
  Scalar residual_norm = Scalar(0);
};

namespace detail {

// Largest-magnitude entry of each left singular vector is made positive
// (ties broken by lowest index); the paired right vector flips with it.
template <class Scalar>
void canonicalize_signs(MatrixX<Scalar>& left, MatrixX<Scalar>& right) {
  for (Index k = 0; k < left.cols(); ++k) {
    Index pivot = 0;
    Scalar best = std::abs(left(0, k));
    for (Index i = 1; i < left.rows(); ++i) {
      const Scalar mag = std::abs(left(i, k));
      if (mag > best) {
        best = mag;
        pivot = i;
      }
    }
    if (left(pivot, k) < Scalar(0)) {
      left.col(k) = -left.col(k);
      right.col(k) = -right.col(k);
    }
  }
}

// Exactly symmetric Gram of one column set: only the lower triangle is
// computed, then mirrored.
template <class Scalar>
MatrixX<Scalar> self_gram(const MatrixX<Scalar>& columns) {
  MatrixX<Scalar> g = MatrixX<Scalar>::Zero(columns.cols(), columns.cols());
  g.template selfadjointView<Eigen::Lower>().rankUpdate(columns.transpose());
  return MatrixX<Scalar>(g.template selfadjointView<Eigen::Lower>());
}

template <class Scalar>
MatrixX<Scalar> hstack(const std::vector<MatrixX<Scalar>>& blocks) {
  Index rows = 0;
  Index cols = 0;
  for (const auto& block : blocks) {
    if (block.cols() == 0) continue;
    if (rows == 0) rows = block.rows();
    if (block.rows() != rows)
      throw ShapeError("[linalg] column sets disagree on ambient dimension: " +
                       std::to_string(block.rows()) + " vs " + std::to_string(rows));
    cols += block.cols();
  }
  MatrixX<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& block : blocks) {
    if (block.cols() == 0) continue;
    out.middleCols(at, block.cols()) = block;
    at += block.cols();
  }
  return out;
}

}  // namespace detail

/// SVD of `matrix` keeping exactly the triplets with sigma > rank_tol *
/// sigma_max. A zero matrix yields an empty bundle. Deterministic: repeated
/// calls on the same input produce bitwise-identical bundles.
template <class Scalar>
SvdBundle<Scalar> truncated_svd(const MatrixX<Scalar>& matrix, Scalar rank_tol) {
  if (matrix.rows() < 1 || matrix.cols() < 1)
    throw ShapeError("[linalg] truncated_svd needs a non-empty matrix");
  if (rank_tol < Scalar(0) || rank_tol >= Scalar(1))
    throw ConfigError("[linalg] rank_tol must lie in [0, 1)");
  if (!matrix.allFinite())
    throw NumericError("[linalg] truncated_svd input has non-finite entries");

  Eigen::BDCSVD<MatrixX<Scalar>> svd(matrix, Eigen::ComputeThinU | Eigen::ComputeThinV);
  MatrixX<Scalar> left = svd.matrixU();
  MatrixX<Scalar> right = svd.matrixV();
  VectorX<Scalar> sigmas = svd.singularValues();

  // Eigen 3.4's divide-and-conquer SVD can misfactor inputs with structured
  // zero blocks (exactly what magnitude-trimmed deltas look like). Verify the
  // factorization; Jacobi is slower but dependable.
  const Scalar scale = matrix.norm();
  const Scalar verify_tol = Eigen::numext::sqrt(Eigen::NumTraits<Scalar>::epsilon());
  if (scale > Scalar(0) &&
      (left * sigmas.asDiagonal() * right.transpose() - matrix).norm() > verify_tol * scale) {
    Eigen::JacobiSVD<MatrixX<Scalar>> jacobi(matrix,
                                             Eigen::ComputeThinU | Eigen::ComputeThinV);
    left = jacobi.matrixU();
    right = jacobi.matrixV();
    sigmas = jacobi.singularValues();
  }

  Index r = 0;
  const Scalar cutoff = sigmas.size() > 0 ? rank_tol * sigmas(0) : Scalar(0);
  while (r < sigmas.size() && sigmas(r) > cutoff) ++r;

  SvdBundle<Scalar> bundle;
  bundle.source_rows = matrix.rows();
  bundle.source_cols = matrix.cols();
  bundle.sigmas = sigmas.head(r);
  bundle.left = left.leftCols(r);
  bundle.right = right.leftCols(r);
  detail::canonicalize_signs(bundle.left, bundle.right);
  return bundle;
}

/// Gram matrix over concatenated column sets: entry (p, q) is the inner
/// product of flat-indexed column p of `a` with column q of `b`. Symmetric
/// (exactly, in floating point) when a == b.
template <class Scalar>
MatrixX<Scalar> gram(const std::vector<MatrixX<Scalar>>& a,
                     const std::vector<MatrixX<Scalar>>& b) {
  const MatrixX<Scalar> lhs = detail::hstack(a);
  if (&a == &b) return detail::self_gram(lhs);
  const MatrixX<Scalar> rhs = detail::hstack(b);
  if (lhs.cols() == 0 || rhs.cols() == 0) return MatrixX<Scalar>(lhs.cols(), rhs.cols());
  if (lhs.rows() != rhs.rows())
    throw ShapeError("[linalg] gram operands disagree on ambient dimension: " +
                     std::to_string(lhs.rows()) + " vs " + std::to_string(rhs.rows()));
  return lhs.transpose() * rhs;
}

template <class Scalar>
MatrixX<Scalar> gram(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (&a == &b) return detail::self_gram(a);
  return gram(std::vector<MatrixX<Scalar>>{a}, std::vector<MatrixX<Scalar>>{b});
}

/// Elementwise matrix product.
template <class DerivedA, class DerivedB>
auto hadamard(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("[linalg] hadamard operands differ in shape: " +
                     std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  return a.cwiseProduct(b).eval();
}

/// Minimum-norm least-squares solution of a symmetric system. Singular values
/// of `coeff` below solver_tol times the largest are treated as zero, so
/// singular systems degrade gracefully; the 2-norm residual is reported
/// alongside the weights.
template <class Scalar>
LeastSquaresSolution<Scalar> solve_sym(const MatrixX<Scalar>& coeff,
                                       const VectorX<Scalar>& rhs, Scalar solver_tol) {
  if (coeff.rows() != coeff.cols())
    throw ShapeError("[linalg] solve_sym needs a square matrix, got " +
                     std::to_string(coeff.rows()) + "x" + std::to_string(coeff.cols()));
  if (coeff.rows() != rhs.size())
    throw ShapeError("[linalg] solve_sym right-hand side has length " +
                     std::to_string(rhs.size()) + ", expected " + std::to_string(coeff.rows()));
  if (coeff.size() == 0) return {VectorX<Scalar>(0), Scalar(0)};
  if (!coeff.allFinite() || !rhs.allFinite())
    throw NumericError("[linalg] solve_sym input has non-finite entries");
  const Scalar scale = coeff.template lpNorm<Eigen::Infinity>();
  if ((coeff - coeff.transpose()).template lpNorm<Eigen::Infinity>() >
      Scalar(1e-6) * std::max(scale, Scalar(1)))
    throw NumericError("[linalg] solve_sym input is not symmetric within 1e-6");

  Eigen::BDCSVD<MatrixX<Scalar>> svd(coeff, Eigen::ComputeThinU | Eigen::ComputeThinV);
  MatrixX<Scalar> left = svd.matrixU();
  MatrixX<Scalar> right = svd.matrixV();
  VectorX<Scalar> sigmas = svd.singularValues();
  const Scalar verify_tol = Eigen::numext::sqrt(Eigen::NumTraits<Scalar>::epsilon());
  if (scale > Scalar(0) &&
      (left * sigmas.asDiagonal() * right.transpose() - coeff).norm() >
          verify_tol * coeff.norm()) {
    Eigen::JacobiSVD<MatrixX<Scalar>> jacobi(coeff, Eigen::ComputeThinU | Eigen::ComputeThinV);
    left = jacobi.matrixU();
    right = jacobi.matrixV();
    sigmas = jacobi.singularValues();
  }

  // Pseudo-inverse application: system singular values at or below
  // solver_tol times the largest are treated as zero.
  const Scalar cutoff = sigmas.size() > 0 ? solver_tol * sigmas(0) : Scalar(0);
  VectorX<Scalar> projected = left.transpose() * rhs;
  for (Index i = 0; i < projected.size(); ++i)
    projected(i) = sigmas(i) > cutoff ? projected(i) / sigmas(i) : Scalar(0);
  LeastSquaresSolution<Scalar> solution;
  solution.weights = right * projected;
  solution.residual_norm = (coeff * solution.weights - rhs).norm();
  return solution;
}

}  // namespace stfmerge
