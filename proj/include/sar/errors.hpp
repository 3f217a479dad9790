#pragma once

#include <stdexcept>
#include <string>

namespace sar {

/// Bad or inconsistent configuration (dimensions, counts, unknown keys).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// An operation was called with arguments outside its contract.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A data-structure invariant was violated (e.g. token index out of range).
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Corrupt, truncated or unsupported persisted data.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Loss or gradient became NaN/Inf; the step was not applied.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace sar
