#pragma once

#include <stdexcept>
#include <string>

namespace ehrtext {

// Base of every error raised by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error { using Error::Error; };
class DegenerateVector : public Error { using Error::Error; };
class ContractViolation : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class DivergedError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class UnsupportedVersion : public Error { using Error::Error; };
class UndefinedAuc : public Error { using Error::Error; };

namespace detail {

inline void require(bool cond, const std::string& what) {
    if (!cond) {
        throw ContractViolation(what);
    }
}

}  // namespace detail
}  // namespace ehrtext
