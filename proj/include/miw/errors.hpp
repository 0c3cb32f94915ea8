#pragma once

#include <stdexcept>
#include <string>

namespace miw {

// Error taxonomy shared across the toolkit. The CLI maps these onto exit
// codes: ConfigError -> 2, the data-shaped ones -> 3, TrainingError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration or parameter value.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed container: missing magic, garbled header, truncated payload.
struct FormatError : Error {
  using Error::Error;
};

// Operand dimensions incompatible with the operation.
struct ShapeError : Error {
  using Error::Error;
};

// Payload values violate a data contract (non-finite, bad label, empty).
struct DataError : Error {
  using Error::Error;
};

// Named entity (channel, tensor, command) not found.
struct NameError : Error {
  using Error::Error;
};

// Filesystem-level failure (open, read, write).
struct IoError : Error {
  using Error::Error;
};

// Index or window outside the valid range.
struct BoundsError : Error {
  using Error::Error;
};

// A class is too small for the requested stratified partition.
struct StratificationError : Error {
  using Error::Error;
};

// Divergence or other unrecoverable failure during model fitting.
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace miw
