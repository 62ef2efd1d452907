#pragma once

#include <stdexcept>
#include <string>

namespace mvmatch {

// Malformed input files, invariant violations in manifests, I/O failures.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad arguments or configuration values.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite losses or gradients, shape mismatches between cached activations
// and parameters.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mvmatch
