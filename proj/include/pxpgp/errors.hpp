#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pxpgp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on the caller's arguments was violated.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Cholesky factorization failed even after the jitter schedule was exhausted.
class IllConditioned : public Error {
 public:
  using Error::Error;
};

/// Agents or the network fabric received messages that break the exchange
/// rules (duplicate ids, wrong neighbor counts, reads from non-neighbors).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. `line()` is 1-based, 0 when not tied to a line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace pxpgp
