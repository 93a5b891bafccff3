#pragma once

#include <stdexcept>
#include <string>

namespace causaltrial {

/// Base exception for contract violations and bad input anywhere in the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Input data could not be parsed or violates the trial schema.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what) {}
};

/// Caller passed arguments outside an operation's preconditions.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(what) {}
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

}  // namespace detail
}  // namespace causaltrial
