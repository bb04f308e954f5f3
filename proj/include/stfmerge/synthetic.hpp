// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "stfmerge/linalg.hpp"

namespace stfmerge {

/// Synthetic low-rank task matrices with a controllable principal-angle
/// overlap between the tasks' singular subspaces: overlap 0 gives independent
/// random subspaces, overlap 1 makes all tasks share the same ones.
struct SyntheticTaskOptions {
  Index rows = 16;
  Index cols = 16;
  Index rank = 4;
  int tasks = 2;
  double overlap = 0.0;       // in [0, 1]: squared cosine of the shared angle
  double sigma_max = 1.0;
  double sigma_decay = 0.7;   // geometric spectrum decay per retained triplet
  double sigma_jitter = 0.05; // relative jitter, keeps spectra free of ties
};

namespace detail {

inline MatrixX<double> random_gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixX<double> out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

inline MatrixX<double> random_orthonormal(Index rows, Index cols, std::mt19937_64& rng) {
  const MatrixX<double> gaussian = random_gaussian(rows, cols, rng);
  Eigen::HouseholderQR<MatrixX<double>> qr(gaussian);
  MatrixX<double> q = qr.householderQ() * MatrixX<double>::Identity(rows, cols);
  return q;
}

// Orthonormal columns orthogonal to every column of `avoid`.
inline MatrixX<double> random_orthonormal_complement(Index rows, Index cols,
                                                     const MatrixX<double>& avoid,
                                                     std::mt19937_64& rng) {
  MatrixX<double> gaussian = random_gaussian(rows, cols, rng);
  gaussian -= avoid * (avoid.transpose() * gaussian);
  Eigen::HouseholderQR<MatrixX<double>> qr(gaussian);
  MatrixX<double> q = qr.householderQ() * MatrixX<double>::Identity(rows, cols);
  // One more projection pass keeps the complement numerically clean.
  q -= avoid * (avoid.transpose() * q);
  for (Index j = 0; j < cols; ++j) q.col(j).normalize();
  return q;
}

}  // namespace detail

inline std::vector<MatrixX<double>> synthetic_task_matrices(const SyntheticTaskOptions& options,
                                                            std::mt19937_64& rng) {
  if (options.rank < 1 || options.tasks < 1)
    throw ConfigError("[synthetic] rank and task count must be positive");
  if (options.overlap < 0.0 || options.overlap > 1.0)
    throw ConfigError("[synthetic] overlap must lie in [0, 1]");
  if (2 * options.rank > std::min(options.rows, options.cols))
    throw ConfigError("[synthetic] need 2*rank <= min(rows, cols) to control overlap");

  const double cos_theta = std::sqrt(options.overlap);
  const double sin_theta = std::sqrt(1.0 - options.overlap);
  const MatrixX<double> shared_left =
      detail::random_orthonormal(options.rows, options.rank, rng);
  const MatrixX<double> shared_right =
      detail::random_orthonormal(options.cols, options.rank, rng);

  std::uniform_real_distribution<double> jitter(-options.sigma_jitter, options.sigma_jitter);
  std::vector<MatrixX<double>> matrices;
  matrices.reserve(static_cast<std::size_t>(options.tasks));
  for (int t = 0; t < options.tasks; ++t) {
    const MatrixX<double> left =
        cos_theta * shared_left +
        sin_theta * detail::random_orthonormal_complement(options.rows, options.rank,
                                                          shared_left, rng);
    const MatrixX<double> right =
        cos_theta * shared_right +
        sin_theta * detail::random_orthonormal_complement(options.cols, options.rank,
                                                          shared_right, rng);
    VectorX<double> sigmas(options.rank);
    double value = options.sigma_max;
    for (Index k = 0; k < options.rank; ++k) {
      sigmas(k) = value * (1.0 + jitter(rng));
      value *= options.sigma_decay;
    }
    matrices.push_back(left * sigmas.asDiagonal() * right.transpose());
  }
  return matrices;
}

}  // namespace stfmerge
