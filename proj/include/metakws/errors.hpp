#pragma once

#include <stdexcept>
#include <string>

namespace metakws {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

/// Malformed input file (WAV, checkpoint, feature cache, manifest).
struct FormatError : Error {
    using Error::Error;
};

/// Corpus layout or sampling precondition not met.
struct DataError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

/// Non-finite or exploding loss during training.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace metakws
