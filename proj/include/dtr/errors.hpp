#pragma once

#include <stdexcept>
#include <string>

namespace dtr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition on caller-supplied options.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed (non-convergence, separation, positivity...).
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace dtr
