#ifndef CL2GD_ERRORS_HPP_
#define CL2GD_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace cl2gd {

/// Invalid parameters or configuration (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed input data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A runtime invariant did not hold (CLI exit code 3).
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cl2gd

#endif  // CL2GD_ERRORS_HPP_
