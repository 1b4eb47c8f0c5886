#pragma once

#include <stdexcept>
#include <string>

namespace sre {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised for invalid or inconsistent run configurations (CLI exit code 1).
class ConfigError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

}  // namespace detail
}  // namespace sre
