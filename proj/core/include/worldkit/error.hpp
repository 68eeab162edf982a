#pragma once

#include <stdexcept>
#include <string>

namespace worldkit {

/// Raised when a caller violates an operation's precondition (bad shape,
/// non-positive scale, label out of range, ...).
class InvalidParameter : public std::invalid_argument {
public:
    explicit InvalidParameter(const std::string &what) : std::invalid_argument(what) {}
};

/// Raised for malformed artifacts (bad magic, truncated file, unsupported version).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string &what) : std::runtime_error(what) {}
};

} // namespace worldkit
