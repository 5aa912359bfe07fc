#pragma once

#include <stdexcept>
#include <string>

namespace bsa {

// Shapes of two operands disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A scalar argument lies outside its admissible range.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// An object was used in a state that does not allow the call
// (uninitialized momentum, stale forward tape, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf encountered in a loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bsa
