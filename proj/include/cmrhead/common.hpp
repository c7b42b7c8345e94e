#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cmrhead {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Thrown when an argument violates a documented precondition.
class precondition_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A zero or otherwise degenerate vector where a direction is required.
class degenerate_input_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid run configuration (CLI exit code 2).
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (CLI exit code 3).
class data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw precondition_error(what);
}

/// Shortest round-trip decimal representation, locale independent.
inline std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace cmrhead
