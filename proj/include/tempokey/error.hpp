#pragma once

#include <stdexcept>
#include <string>

namespace tk {

// Base for everything this library throws on a violated precondition.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor or grid dimensions do not chain.
struct ShapeError : Error {
  using Error::Error;
};

// A scalar argument (label, probability, factor, shift) is outside its domain.
struct RangeError : Error {
  using Error::Error;
};

// Unreadable, malformed or unsupported input files.
struct DataError : Error {
  using Error::Error;
};

struct ChecksumError : DataError {
  using DataError::DataError;
};

// A weight file or cache does not describe the requested configuration.
struct ConfigMismatch : Error {
  using Error::Error;
};

// backward() on something that was not produced by a recorded graph.
struct GraphError : Error {
  using Error::Error;
};

// Training diverged (non-finite loss).
struct NumericError : Error {
  using Error::Error;
};

}  // namespace tk
