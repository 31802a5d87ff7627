#pragma once

#include <stdexcept>
#include <string>

namespace apam {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated a precondition (bad shapes, out-of-range ids, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class DomainError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Malformed or missing input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class IngestError : public DataError {
 public:
  using DataError::DataError;
};

/// Inconsistent run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected during training; carries where it happened.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace apam
