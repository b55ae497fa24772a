#pragma once

#include <stdexcept>
#include <string>

namespace evcmf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (clip container, manifest, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad user-provided input (missing ids, empty files, out-of-range tokens).
class InputError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Violation of an internal contract (e.g. expanding a finished hypothesis).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace evcmf
