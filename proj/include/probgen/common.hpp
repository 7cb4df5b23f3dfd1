// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace probgen {

// Rows are samples, columns are features throughout.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Invalid shapes, dimension mismatches between configs and data.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Malformed input files; carries a 1-based line number when known.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& msg, long line = -1)
      : std::runtime_error(line >= 0 ? msg + " (line " + std::to_string(line) + ")" : msg),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

/// Non-finite loss or trajectory during training/sampling.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& msg, long index)
      : std::runtime_error(msg + " (index " + std::to_string(index) + ")"), index_(index) {}
  long index() const { return index_; }

 private:
  long index_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace probgen
