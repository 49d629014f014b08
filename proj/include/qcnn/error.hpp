#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qcnn {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor or layer shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input outside an operation's mathematical domain (e.g. negative pooling input).
class DomainError : public Error {
public:
    using Error::Error;
};

/// A crop or ROI that rounds to an empty pixel rectangle.
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Loss or weights went non-finite, or some other numerical breakdown.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Malformed file or byte stream.
class FormatError : public Error {
public:
    using Error::Error;
};

class TruncationError : public FormatError {
public:
    TruncationError(const std::string& what, std::size_t offset)
        : FormatError(what + " (stream truncated at offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    [[nodiscard]] std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Field value outside its legal range inside an otherwise well-formed stream.
class CorruptionError : public FormatError {
public:
    using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Model or argument that violates a documented invariant (e.g. encode of an invalid layer).
class InvariantError : public Error {
public:
    using Error::Error;
};

}  // namespace qcnn
