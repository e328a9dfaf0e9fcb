#pragma once

#include <stdexcept>
#include <string>

namespace da6 {

// Tensor shapes that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Violated preconditions on values (non-scalar loss, tau outside (0,1), ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Inconsistent configuration: model, environment, or training settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Map text that cannot be parsed. Line and column are 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int line, int column)
      : std::runtime_error(what + " (line " + std::to_string(line) + ", column " +
                           std::to_string(column) + ")"),
        line_(line),
        column_(column) {}

  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  int line_;
  int column_;
};

// The environment cannot be set up as requested (not enough free spawn cells, ...).
class SetupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace da6
