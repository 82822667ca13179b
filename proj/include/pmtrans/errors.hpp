#pragma once

#include <stdexcept>
#include <string>

namespace pmtrans {

// Every failure raised by the library derives from Error so callers can map
// the kind onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// A documented precondition on argument values was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

class DegenerateInputError : public Error {
public:
    using Error::Error;
};

// NaN/Inf showed up in a forward value or a gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

// An operation was called before the state it depends on exists.
class SequencingError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class OracleError : public Error {
public:
    using Error::Error;
};

}  // namespace pmtrans
