#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hasd {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated precondition: bad shapes, invalid values, invalid configuration.
class ArgumentError : public Error {
public:
    explicit ArgumentError(const std::string& msg) : Error(msg) {}
};

// Computation produced a non-finite value or otherwise diverged.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Malformed binary container. Carries the kind of defect and the byte
// offset at which it was detected.
class FormatError : public Error {
public:
    enum class Kind { bad_magic, bad_version, truncated, size_mismatch };

    FormatError(Kind kind, std::uint64_t offset, const std::string& msg)
        : Error(msg + " (byte offset " + std::to_string(offset) + ")"),
          kind_(kind),
          offset_(offset) {}

    Kind kind() const noexcept { return kind_; }
    std::uint64_t offset() const noexcept { return offset_; }

private:
    Kind kind_;
    std::uint64_t offset_;
};

// Well-formed container whose contents do not match the expected schema
// (e.g. a checkpoint missing a required tensor).
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string& msg) : Error(msg) {}
};

}  // namespace hasd
