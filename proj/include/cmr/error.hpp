#pragma once

#include <stdexcept>
#include <string>

namespace cmr {

// Bad input: malformed files, out-of-range arguments, violated preconditions.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

// Failure while running an otherwise valid computation (divergence, pool exhaustion, I/O).
class RuntimeError : public std::runtime_error {
public:
    explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace cmr
