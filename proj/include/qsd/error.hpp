// Copyright (c) 2026, The qsemdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace qsd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown enumerator.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A required input artifact does not exist.
class MissingArtifactError : public Error {
 public:
  MissingArtifactError(std::string artifact, const std::string& what)
      : Error(what), artifact_(std::move(artifact)) {}
  const std::string& artifact() const noexcept { return artifact_; }

 private:
  std::string artifact_;
};

/// Numerical failure (NaN/inf) while optimizing.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Map sets that must be disjoint share an element.
class LeakageError : public Error {
 public:
  using Error::Error;
};

}  // namespace qsd
