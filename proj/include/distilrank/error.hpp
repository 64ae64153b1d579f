#pragma once

#include <stdexcept>
#include <string>

namespace distilrank {

// Root of every error the library throws. The subclasses map one-to-one onto
// the CLI exit statuses (usage 1, data 2, transport/budget 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed input files, violated invariants, divergence.
class DataError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string at_line(std::size_t line, const std::string& what) {
  return "line " + std::to_string(line) + ": " + what;
}

}  // namespace detail
}  // namespace distilrank
