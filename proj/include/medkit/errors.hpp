#pragma once

#include <stdexcept>
#include <string>

namespace medkit {

// Base for every error the library throws on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes that do not conform (matmul inner dims, concat widths, ...).
class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced by a forward op, or a non-finite loss.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed input files or checkpoints.
class FormatError : public Error {
public:
    using Error::Error;
};

// Bad configuration or arguments; maps to CLI exit code 1.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace medkit
