#pragma once

#include <stdexcept>
#include <string>

namespace vralign {

/// Base for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Array rank/dimension mismatches (matmul shapes, dice shape mismatch, ...).
struct ShapeError : Error {
  using Error::Error;
};

/// Mathematically invalid values: zero-norm cosine input, single-class AUC,
/// empty ground-truth mask, zero-variance paired test, poisoned gradients.
struct DomainError : Error {
  using Error::Error;
};

/// Invalid configuration: bad encoder dims, batch too small, vocabulary
/// overflow, stratification impossible, incompatible checkpoint.
struct ConfigError : Error {
  using Error::Error;
};

/// File and serialization failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace vralign
