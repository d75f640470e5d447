#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>

namespace kginject {

// Base for every failure the library reports by exception.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input that does not match a documented file schema. Carries the zero-based
// record index when the failure is attributable to a single record.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::optional<std::size_t> record = std::nullopt)
        : Error(record ? "record " + std::to_string(*record) + ": " + what : what), record_(record) {}

    std::optional<std::size_t> record() const noexcept { return record_; }

private:
    std::optional<std::size_t> record_;
};

// A precondition or domain invariant was violated by the caller.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Stored artifact failed a hash, fingerprint or length check.
class IntegrityError : public Error {
public:
    using Error::Error;
};

// Non-fatal per-record refusal. Pipelines count these instead of aborting.
struct Skip {
    std::string reason;
};

template <class T>
using OrSkip = std::variant<T, Skip>;

template <class T>
bool is_skip(const OrSkip<T>& v) noexcept {
    return std::holds_alternative<Skip>(v);
}

}  // namespace kginject
