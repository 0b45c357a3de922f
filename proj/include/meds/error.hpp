// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace meds {

/// Base class of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Invalid user-supplied configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

/// A precondition of an operation was violated (shape mismatch, empty input).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message) : Error("contract", message) {}
};

/// Unknown class id or other missing key.
class LookupError : public Error {
 public:
  explicit LookupError(const std::string& message) : Error("lookup", message) {}
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message) : Error("domain", message) {}
};

/// A metric is undefined for the given input (e.g. only one label present).
class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& message)
      : Error("undefined-metric", message) {}
};

/// The anomaly pool of a class cannot supply the requested contamination.
class InsufficientPoolError : public Error {
 public:
  InsufficientPoolError(unsigned class_id, const std::string& message)
      : Error("insufficient-pool", message), class_id_(class_id) {}

  unsigned class_id() const noexcept { return class_id_; }

 private:
  unsigned class_id_;
};

enum class ParseErrorCode {
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kDimensionOverflow,
  kMalformed,
};

const char* to_string(ParseErrorCode code) noexcept;

/// Failure to decode one of the binary or text file formats.
class ParseError : public Error {
 public:
  ParseError(ParseErrorCode code, const std::string& message)
      : Error(std::string("parse.") + to_string(code), message), code_(code) {}

  ParseErrorCode code() const noexcept { return code_; }

 private:
  ParseErrorCode code_;
};

/// Filesystem failure (cannot open, short write).
class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace meds
