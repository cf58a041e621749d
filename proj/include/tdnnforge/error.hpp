#pragma once

#include <stdexcept>
#include <string>

namespace tdnnforge {

// Error hierarchy used across the library. Every category maps to one CLI
// exit-code class: config/usage problems, numeric failures, check failures.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor/matrix shapes; message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid pooling/convolution/band geometry.
struct GeometryError : Error {
    using Error::Error;
};

// Non-finite values, diverged training, failed numeric preconditions.
struct NumericError : Error {
    using Error::Error;
};

// Malformed archive/checkpoint bytes; message carries the byte offset.
struct FormatError : Error {
    using Error::Error;
};

// Bad caller-supplied data (labels out of range, too-short audio, ...).
struct InputError : Error {
    using Error::Error;
};

// Invalid architecture/training configuration.
struct ConfigError : Error {
    using Error::Error;
};

// API misuse, e.g. backward called with a stale or mismatched cache.
struct UsageError : Error {
    using Error::Error;
};

}  // namespace tdnnforge
