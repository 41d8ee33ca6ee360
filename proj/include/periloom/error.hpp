#pragma once

#include <stdexcept>
#include <string>

namespace periloom {

/// Base of every error raised by the library. `category()` is the short
/// machine-readable tag the CLI prints on failure.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* category() const noexcept { return "error"; }
};

/// A configuration or input value violates its contract. `field()` names it.
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& message)
        : Error(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }
    const char* category() const noexcept override { return "config"; }

private:
    std::string field_;
};

/// Malformed data file. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& message)
        : Error(line ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}
    std::size_t line() const noexcept { return line_; }
    const char* category() const noexcept override { return "data"; }

private:
    std::size_t line_;
};

/// Generic data-level failure (empty corpus, unstratifiable class, ...).
class DataError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "data"; }
};

/// Checkpoint / vocabulary / variant incompatibility.
class CompatibilityError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "compat"; }
};

/// Internal invariant violation (NaN in a trained table, broken shape).
class InvariantError : public Error {
public:
    using Error::Error;
    const char* category() const noexcept override { return "internal"; }
};

}  // namespace periloom
