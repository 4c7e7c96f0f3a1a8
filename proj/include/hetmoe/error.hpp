#pragma once

#include <stdexcept>
#include <string>

namespace hetmoe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (log of a
/// non-positive value, negative probability mass, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced during training or evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient tape (double backward, foreign handles).
class TapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or malformed config document.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation would violate a structural invariant of the model
/// (e.g. a router left with fewer experts than its top_k).
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// A referenced dataset, expert or router does not exist.
class MissingEntityError : public Error {
 public:
  using Error::Error;
};

/// Input data inconsistent with the task (label out of range, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace hetmoe
