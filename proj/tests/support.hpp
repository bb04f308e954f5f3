// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: seeded random data, relative-error
// measures, scratch directories, and synthetic transformer-shaped
// checkpoints.

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stfmerge/linalg.hpp"
#include "stfmerge/tensor_store.hpp"

namespace testsup {

using stfmerge::Index;
using stfmerge::MatrixX;
using stfmerge::VectorX;

inline MatrixX<double> random_matrix(Index rows, Index cols, std::mt19937_64& rng,
                                     double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  MatrixX<double> out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  return out;
}

inline MatrixX<double> random_low_rank(Index rows, Index cols, Index rank, std::mt19937_64& rng,
                                       double scale = 1.0) {
  return random_matrix(rows, rank, rng, scale) * random_matrix(rank, cols, rng, scale) /
         std::sqrt(static_cast<double>(rank));
}

inline double rel_frobenius(const MatrixX<double>& a, const MatrixX<double>& b) {
  const double denom = b.norm();
  if (denom == 0.0) return a.norm();
  return (a - b).norm() / denom;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    std::mt19937_64 rng(std::random_device{}());
    path_ = base / ("stfmerge_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline stfmerge::TensorRecord make_record(std::string name, std::vector<std::int64_t> shape,
                                          std::vector<float> data) {
  stfmerge::TensorRecord record;
  record.name = std::move(name);
  record.shape = std::move(shape);
  record.data = std::move(data);
  return record;
}

inline stfmerge::TensorRecord random_record(std::string name, std::vector<std::int64_t> shape,
                                            std::mt19937_64& rng, float scale = 1.0F) {
  std::normal_distribution<float> normal(0.0F, scale);
  stfmerge::TensorRecord record;
  record.name = std::move(name);
  record.shape = std::move(shape);
  record.data.resize(static_cast<std::size_t>(record.numel()));
  for (auto& value : record.data) value = normal(rng);
  return record;
}

/// Tensor names and shapes of a small transformer-like model.
inline std::vector<stfmerge::TensorRecord> transformer_records(int layers, Index hidden,
                                                               std::mt19937_64& rng) {
  std::vector<stfmerge::TensorRecord> records;
  const Index ff = 4 * hidden;
  records.push_back(random_record("embed.tokens.weight", {2 * hidden, hidden}, rng));
  for (int i = 0; i < layers; ++i) {
    const std::string prefix = "block." + std::to_string(i) + ".";
    records.push_back(random_record(prefix + "attn.q.weight", {hidden, hidden}, rng));
    records.push_back(random_record(prefix + "attn.o.weight", {hidden, hidden}, rng));
    records.push_back(random_record(prefix + "ffn.wi.weight", {ff, hidden}, rng));
    records.push_back(random_record(prefix + "ffn.wo.weight", {hidden, ff}, rng));
    records.push_back(random_record(prefix + "ffn.wi.bias", {ff}, rng, 0.1F));
    records.push_back(random_record(prefix + "layer_norm.weight", {hidden}, rng, 0.1F));
  }
  records.push_back(random_record("final_layer_norm.weight", {hidden}, rng, 0.1F));
  return records;
}

/// Derives a fine-tuned variant by adding scaled noise to every tensor.
inline std::vector<stfmerge::TensorRecord> perturb_records(
    const std::vector<stfmerge::TensorRecord>& base, std::mt19937_64& rng, float scale) {
  std::normal_distribution<float> normal(0.0F, scale);
  std::vector<stfmerge::TensorRecord> out = base;
  for (auto& record : out)
    for (auto& value : record.data) value += normal(rng);
  return out;
}

/// Writes a base checkpoint plus `tasks` perturbed fine-tunes; returns paths.
struct WrittenSet {
  std::filesystem::path base;
  std::vector<std::filesystem::path> tasks;
  std::vector<std::string> task_ids;
};

inline WrittenSet write_transformer_set(const TempDir& dir, int layers, Index hidden, int tasks,
                                        std::uint64_t seed, float perturb_scale = 0.05F) {
  std::mt19937_64 rng(seed);
  const auto base_records = transformer_records(layers, hidden, rng);
  WrittenSet set;
  set.base = dir.file("base.safetensors");
  stfmerge::write_checkpoint(set.base, base_records);
  for (int t = 0; t < tasks; ++t) {
    const auto task_records = perturb_records(base_records, rng, perturb_scale);
    auto path = dir.file("task" + std::to_string(t) + ".safetensors");
    stfmerge::write_checkpoint(path, task_records);
    set.tasks.push_back(std::move(path));
    set.task_ids.push_back("task" + std::to_string(t));
  }
  return set;
}

}  // namespace testsup
