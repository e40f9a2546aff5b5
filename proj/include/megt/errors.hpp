#pragma once

#include <stdexcept>
#include <string>

namespace megt {

// Error hierarchy. The CLI maps these onto its exit-code contract.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class DataError : public Error {
public:
  using Error::Error;
};

/// Malformed bag/checkpoint/manifest input.
class ParseError : public DataError {
public:
  enum class Kind { bad_magic, truncated, version_mismatch, malformed };
  ParseError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

class ContractError : public Error {
public:
  using Error::Error;
};

/// Non-finite values during training. Carries the 1-based epoch.
class NumericError : public Error {
public:
  NumericError(int epoch, const std::string& what) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

private:
  int epoch_;
};

}  // namespace megt
