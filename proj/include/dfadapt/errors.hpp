#ifndef DFADAPT_ERRORS_HPP
#define DFADAPT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace dfadapt {

// Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
// ProtocolError -> 3. Anything else is a bug.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration values (temperature <= 0, unknown config keys, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Violated data/input contracts: shape mismatches, non-finite inputs,
// unreadable files, empty batches.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Violated training protocol: updating a frozen model, unfrozen teacher,
// source-domain samples reaching the adaptation loop.
class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

} // namespace dfadapt

#endif
