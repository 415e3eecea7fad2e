#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace sfd {

using Vec = Eigen::VectorXd;
// A batch of d-vectors, one chain per column.
using Mat = Eigen::MatrixXd;

// Raised when a caller violates an operation's preconditions.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when a computation produces non-finite values or cannot proceed numerically.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a file does not match the expected schema.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ArgumentError(msg);
}

}  // namespace sfd
