#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace textseg {

// Error taxonomy shared across the library. The CLI maps these onto its
// exit-code contract (config 2, I/O 3, numeric 4).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not line up. Message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf reached an operation that requires finite values.
struct NumericError : Error {
  using Error::Error;
};

// A caller broke an API precondition (non-scalar loss, all-masked keys, ...).
struct ContractError : Error {
  using Error::Error;
};

// Report text does not match the template grammar.
struct ParseError : Error {
  ParseError(const std::string& msg, std::size_t position)
      : Error(msg + " (at position " + std::to_string(position) + ")"),
        position(position) {}
  std::size_t position = 0;
};

// File missing, header corrupt, payload truncated, ...
struct IoError : Error {
  using Error::Error;
};

// Bad key, unparsable value or invalid combination in a RunConfig.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace textseg
