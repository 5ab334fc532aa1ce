#pragma once

#include <stdexcept>
#include <string>

namespace hmdr {

/// Raised when a caller violates an operation's preconditions (shapes,
/// ranges, cardinalities).
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for malformed or inconsistent files and directories.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// Raised when a loss or parameter becomes non-finite during training.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a checkpoint does not match the configuration it is loaded into.
class IncompatibleCheckpoint : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace hmdr
