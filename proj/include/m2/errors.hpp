#pragma once

#include <stdexcept>
#include <string>

namespace m2 {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in an input, a loss, or a gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or a ParamSpec that cannot be honoured.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An operation was called outside its precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad data handed to the library (empty corpus, no valid region, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// A file on disk does not follow its documented layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace m2
