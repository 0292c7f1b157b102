#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pointlabel {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input lies outside the domain of an operation (empty reductions, bad labels, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed text input. Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Well-formed input whose structure disagrees with its declared schema.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Raster sampling could not produce a value (all neighbours nodata).
class SamplingError : public Error {
public:
    using Error::Error;
};

/// Query outside the raster extent.
class BoundsError : public Error {
public:
    using Error::Error;
};

/// Non-finite value where finite numbers are required.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace pointlabel
