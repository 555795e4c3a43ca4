#pragma once

#include <stdexcept>
#include <string>

namespace e2t {

/// Shape or axis mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation was invoked in a state that cannot serve it (e.g. backward
/// before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid parameters, bit widths, or config values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf where finite values are required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace e2t
