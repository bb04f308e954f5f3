// Copyright (c) 2026 stfmerge contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace stfmerge {

/// Base class for all stfmerge errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed container file (bad header, truncation, duplicate names).
struct FormatError : Error {
  using Error::Error;
};

/// Element type not supported by the container reader/writer.
struct DtypeError : Error {
  using Error::Error;
};

/// Invalid configuration value, pattern, or flag combination.
struct ConfigError : Error {
  using Error::Error;
};

/// Incompatible tensor or matrix dimensions.
struct ShapeError : Error {
  using Error::Error;
};

/// Non-finite values or a numerically unusable input.
struct NumericError : Error {
  using Error::Error;
};

/// Checkpoint sets that disagree on tensor names or shapes.
struct SchemaError : Error {
  using Error::Error;
};

/// Filesystem read/write failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace stfmerge
