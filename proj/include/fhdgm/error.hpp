#pragma once

#include <stdexcept>
#include <string>

namespace fhdgm {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input files or cells (carries a human-readable location).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside its declared domain (h outside [h1,h2], bad unit, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid arguments to an operation (bad sizes, k > n, overlap, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: non-finite intermediate, singular matrix, loglik decrease.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fhdgm
