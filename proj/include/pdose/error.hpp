#pragma once

#include <stdexcept>
#include <string>

namespace pdose {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// A position or index fell outside the addressed grid.
class RangeError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class SpectrumError : public Error {
 public:
  using Error::Error;
};

class EdgeNotFoundError : public Error {
 public:
  using Error::Error;
};

/// Tensor or vector dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; carries the epoch at which the loss became non-finite.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t epoch) : Error(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Malformed, truncated, or version-incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw PreconditionError(message);
}

}  // namespace detail

}  // namespace pdose
