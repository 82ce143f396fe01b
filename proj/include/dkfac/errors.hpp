#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dkfac {

// Shape or size disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite or otherwise unusable numeric input.
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, std::ptrdiff_t pivot)
      : std::runtime_error(what), pivot_(pivot) {}
  std::ptrdiff_t pivot() const noexcept { return pivot_; }

 private:
  std::ptrdiff_t pivot_;
};

// An operation was invoked on an object that is not ready for it
// (e.g. preconditioning before any decomposition exists).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Collective protocol violation: shape disagreement, mismatched call sites,
// missing or duplicate contributions, or a rendezvous timeout.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(const std::string& what, int rank = -1)
      : std::runtime_error(what), rank_(rank) {}
  int rank() const noexcept { return rank_; }

 private:
  int rank_;
};

// Worker replicas diverged after a step.
class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

// Malformed or truncated dataset file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dkfac
