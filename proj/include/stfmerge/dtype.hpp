// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>

#include "stfmerge/errors.hpp"

namespace stfmerge {

/// Element types understood by the checkpoint container. 16-bit floats are
/// accepted on read and promoted to 32-bit; all in-memory math is 32-bit or
/// wider.
enum class Dtype { F32, F16, BF16 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32:
      return 4;
    case Dtype::F16:
    case Dtype::BF16:
      return 2;
  }
  return 4;
}

inline std::string dtype_name(Dtype d) {
  switch (d) {
    case Dtype::F32:
      return "F32";
    case Dtype::F16:
      return "F16";
    case Dtype::BF16:
      return "BF16";
  }
  return "F32";
}

inline Dtype dtype_from_name(const std::string& name) {
  if (name == "F32") return Dtype::F32;
  if (name == "F16") return Dtype::F16;
  if (name == "BF16") return Dtype::BF16;
  throw DtypeError("[tensor_store] unsupported dtype '" + name + "'");
}

/// Widening 16-bit -> 32-bit conversions are exact.
inline float f16_to_f32(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

inline float bf16_to_f32(std::uint16_t bits) {
  return static_cast<float>(Eigen::numext::bit_cast<Eigen::bfloat16>(bits));
}

/// Round-to-nearest-even narrowing, used only when re-narrowing output is
/// requested explicitly.
inline std::uint16_t f32_to_f16(float value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

inline std::uint16_t f32_to_bf16(float value) {
  return Eigen::numext::bit_cast<std::uint16_t>(Eigen::bfloat16(value));
}

}  // namespace stfmerge
