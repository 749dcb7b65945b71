#pragma once

#include <stdexcept>
#include <string>

namespace patchlm {

// Violated precondition of an operation (bad argument, empty input, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Sequence longer than the model's max_seq.
class CapacityError : public ContractError {
 public:
  using ContractError::ContractError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File missing, unreadable, or malformed on disk.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace patchlm
