#pragma once

#include <stdexcept>
#include <string>

namespace metalink {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape disagreement between operands; message names both shapes.
struct DimensionError : Error {
  using Error::Error;
};

// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// Non-finite value produced where the contract requires finite numbers.
struct NumericError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Episode sampling could not satisfy its constraints.
struct SamplingError : Error {
  using Error::Error;
};

// Metric undefined on the given input (e.g. single-class AUC).
struct MetricError : Error {
  using Error::Error;
};

struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace metalink
