#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mcad {

// Base for everything the library throws on bad input or numerical failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Iterate blew up (NaN/Inf objective). Carries the iteration or epoch index.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, int step)
      : NumericalError(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  int step() const noexcept { return step_; }

 private:
  int step_;
};

}  // namespace mcad
