#pragma once

#include <stdexcept>
#include <string>

namespace lat {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes of operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input is structurally valid but admits no meaningful result (all entries
// masked, zero objects, batch of one in training mode, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition that is not a shape problem.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace lat
