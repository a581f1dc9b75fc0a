#pragma once

#include <stdexcept>
#include <string>

namespace idbp {

/// Bad user input: unreadable or malformed files, invalid configuration.
/// The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf met where finite values are required.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace idbp
