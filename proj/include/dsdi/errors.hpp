// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dsdi {

/// Tensor shapes that do not fit an operator's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid hyperparameters, modes, or generator settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed numeric input (unnormalized distributions, non-probability targets).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Covariance of fewer than two samples.
class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Exhaustive search space beyond the enumeration cap.
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Malformed binary file. `offset` is the byte position where parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// NaN or Inf reached a loss, gradient, or parameter during training.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long iteration = -1)
      : std::runtime_error(iteration >= 0 ? what + " at iteration " + std::to_string(iteration)
                                          : what),
        iteration_(iteration) {}
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

}  // namespace dsdi
