#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aetree {

/// Bad input to a library call (precondition violation).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A cuboid with zero width was compared with a nonzero shape weight.
class DegenerateShapeError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A parent node has zero length or width, so relative parameters are undefined.
class DegenerateParentError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Training produced a non-finite loss.
class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. Carries the 1-based line number when known.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A mixture component lost all its mass and could not be recovered.
class ComponentCollapseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown command, missing or malformed option value.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace aetree
