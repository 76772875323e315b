#pragma once

#include <stdexcept>
#include <string>

namespace afn {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input file or table is missing a required column or has the wrong layout.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A cell could not be parsed; `row` is the 1-based data row.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long row) : Error(what), row_(row) {}
  long row() const { return row_; }

 private:
  long row_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Input lies outside the domain where a statistic is defined.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Clustering could not separate the data (e.g. every window identical).
class ClusteringError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Operation is not available for this model or state (e.g. ablated component).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace afn
