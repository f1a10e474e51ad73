#pragma once

#include <stdexcept>
#include <string>

namespace peftkit {

// Error taxonomy mapped to CLI exit codes: usage/config -> 2, data -> 3,
// numeric failure -> 4.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/rank violations are a usage-class error.
struct DimensionError : UsageError {
    explicit DimensionError(const std::string& msg) : UsageError(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace peftkit
