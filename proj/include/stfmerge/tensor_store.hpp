// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stfmerge/dtype.hpp"
#include "stfmerge/errors.hpp"

namespace stfmerge {

/// One named tensor with its data promoted to 32-bit floats, row-major.
struct TensorRecord {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
  Dtype source_dtype = Dtype::F32;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

/// A tensor's raw bytes as stored in the file, for verbatim passthrough.
struct RawTensor {
  std::string name;
  Dtype dtype = Dtype::F32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;
};

/// Header entry for one tensor: element type, shape, byte range within the
/// data buffer.
struct TensorInfo {
  Dtype dtype = Dtype::F32;
  std::vector<std::int64_t> shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

/// Merge treatment of one parameter tensor.
enum class ParamRole { LinearMatrix, Bias, Embedding, Normalization, Ignore };

std::string role_name(ParamRole role);
ParamRole role_from_name(const std::string& name);

/// One classification rule: a glob pattern (* and ? wildcards; prefix the
/// pattern with "re:" for a full regular expression) mapping matching tensor
/// names to a role.
struct RoleRule {
  std::string pattern;
  ParamRole role = ParamRole::LinearMatrix;
};

/// Ordered name-pattern rules; first match wins. Unmatched 2-D tensors get
/// default_2d, everything else default_other.
struct RoleRules {
  std::vector<RoleRule> rules;
  ParamRole default_2d = ParamRole::LinearMatrix;
  ParamRole default_other = ParamRole::Bias;

  /// Shipped defaults for common transformer naming schemes: norm scales are
  /// averaged, biases and embeddings go through task arithmetic, remaining
  /// 2-D tensors are treated as linear transformation matrices.
  static RoleRules defaults();
};

/// Read-only handle on a checkpoint file. Opening parses the header only;
/// tensor data is read lazily per name. Handles are safe to read from
/// multiple threads.
class CheckpointReader {
 public:
  static CheckpointReader open(const std::filesystem::path& path);

  /// Tensor names in lexicographic order.
  const std::vector<std::string>& names() const { return names_; }
  bool contains(const std::string& name) const { return infos_.count(name) > 0; }
  const TensorInfo& info(const std::string& name) const;

  /// Reads one tensor, promoting 16-bit floats to 32-bit.
  TensorRecord read(const std::string& name) const;
  /// Reads one tensor's bytes without conversion.
  RawTensor read_raw(const std::string& name) const;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::uint64_t data_start_ = 0;
  std::map<std::string, TensorInfo> infos_;
  std::vector<std::string> names_;
};

/// Accumulates tensors and writes the container file on finalize. Nothing is
/// written before finalize, so a name collision never leaves partial output.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(std::filesystem::path path);

  void add(TensorRecord record, Dtype store_as = Dtype::F32);
  void add_raw(RawTensor raw);
  void finalize();

 private:
  struct Pending {
    std::string name;
    Dtype dtype;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> bytes;
  };
  std::filesystem::path path_;
  std::vector<Pending> pending_;
  bool finalized_ = false;
};

/// Writes `records` to `path` in the given order.
void write_checkpoint(const std::filesystem::path& path, const std::vector<TensorRecord>& records);

/// Assigns every tensor in the store exactly one role; deterministic given
/// the rules and the store's name order.
std::map<std::string, ParamRole> classify(const CheckpointReader& store, const RoleRules& rules);

/// Role for a single (name, rank) pair under `rules`.
ParamRole classify_name(const std::string& name, std::size_t ndims, const RoleRules& rules);

/// Densifies a low-rank adapter: returns lora_scale * (B * A) where B is
/// (m, k) and A is (k, n). The result enters the pipeline as a ready-made
/// task matrix for the adapted layer.
TensorRecord materialize_lora_delta(const TensorRecord& a_factor, const TensorRecord& b_factor,
                                    double lora_scale);

/// A pre-trained base plus the fine-tuned (or adapter) checkpoints to merge
/// into it.
struct CheckpointSet {
  CheckpointReader base;
  std::vector<CheckpointReader> tasks;
  std::vector<std::string> task_ids;
};

}  // namespace stfmerge
