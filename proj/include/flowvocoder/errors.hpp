#pragma once

#include <stdexcept>
#include <string>

namespace flowvocoder {

// Bad shapes, bad hyperparameters, malformed config files.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Bad runtime data handed to an operation (non-finite sample, empty wave, ...).
struct InputError : std::runtime_error {
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// A numeric procedure failed: NaN/Inf out of a primitive, root finding did not
// converge, bracket expansion ran away. `where` names the offending primitive.
struct NumericError : std::runtime_error {
  NumericError(const std::string& where, const std::string& what)
      : std::runtime_error(where + ": " + what), where(where) {}
  std::string where;
};

}  // namespace flowvocoder
