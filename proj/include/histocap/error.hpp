#pragma once

#include <stdexcept>
#include <string>

namespace histocap {

// Root of every exception the library throws. The CLI maps the concrete
// subclasses onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation or weight set expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An argument is outside its valid domain (token id >= V, k > M, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf appeared during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Unreadable, malformed or inconsistent files.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad configuration documents or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace histocap
