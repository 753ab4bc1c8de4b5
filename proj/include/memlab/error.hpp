#pragma once

#include <stdexcept>
#include <string>

namespace memlab {

/// Precondition violated by the caller.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A requested target cannot be met by any distribution of the given shape.
class Infeasible : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Input would need more memory than the library is willing to enumerate.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// NaN/Inf showed up in a loss, gradient or parameter.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A statistic has no defined value for this input (e.g. zero rank variance).
class UndefinedResult : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// The out-of-process model bridge could not be reached or answered badly.
class BridgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace memlab
