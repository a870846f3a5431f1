#pragma once

#include <stdexcept>
#include <string>

namespace lunalab {

// Inconsistent shapes, specs or configuration values.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or out-of-range data supplied by the caller (datasets, token ids, targets).
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN / non-finite values encountered during computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// API misuse: backward on a non-scalar, missing gradients, missing artifacts.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace lunalab
