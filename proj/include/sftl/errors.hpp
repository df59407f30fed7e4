#pragma once

#include <stdexcept>
#include <string>

namespace sftl {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Kernel hyperparameters outside the supported range.
class InvalidKernel : public Error {
 public:
  using Error::Error;
};

/// The linear solve for the stationary covariance failed.
class LyapunovSolveFailure : public Error {
 public:
  using Error::Error;
};

/// A timestamp was not strictly greater than the last processed one.
class NonMonotoneTimestamp : public Error {
 public:
  using Error::Error;
};

/// A predicted covariance was numerically singular even after jitter.
class SingularPredictCovariance : public Error {
 public:
  using Error::Error;
};

/// Trajectory query that requires smoothed states before finalization.
class NotSmoothed : public Error {
 public:
  using Error::Error;
};

/// Vector or matrix dimensions inconsistent with the model shape.
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// Subtracting a site from the posterior produced an improper distribution.
class ImproperCalibration : public Error {
 public:
  using Error::Error;
};

/// A tilted Gamma update produced a non-positive rate.
class NonPositiveRate : public Error {
 public:
  using Error::Error;
};

/// A linear system stayed singular after one jitter retry.
class SingularSystem : public Error {
 public:
  using Error::Error;
};

/// An object index exceeds the declared mode dimension.
class IndexOutOfRange : public Error {
 public:
  using Error::Error;
};

/// Same as IndexOutOfRange but raised at prediction time.
class UnknownObject : public Error {
 public:
  using Error::Error;
};

/// Operation requires at least one processed batch.
class EmptyModel : public Error {
 public:
  using Error::Error;
};

/// Checkpoint bytes failed validation (magic, version, or truncation).
class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

/// Scoring requested on an empty test set.
class EmptyTestSet : public Error {
 public:
  using Error::Error;
};

/// Model rank incompatible with the requested evaluation.
class IncompatibleRank : public Error {
 public:
  using Error::Error;
};

/// File could not be opened or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input line; carries 1-based line and column positions.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, std::size_t column, const std::string& reason)
      : Error("parse error at line " + std::to_string(line) + ", column " +
              std::to_string(column) + ": " + reason),
        line_(line),
        column_(column),
        reason_(reason) {}

  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }
  const std::string& reason() const { return reason_; }

 private:
  std::size_t line_;
  std::size_t column_;
  std::string reason_;
};

}  // namespace sftl
