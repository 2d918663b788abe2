#pragma once

#include <stdexcept>
#include <string>

namespace vti {

// Caller broke a precondition: mismatched shapes, bad token ids, empty input.
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Numeric domain violation: log of a non-positive value, exp overflow.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents: manifest lines, checkpoints, config files.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failure; the message names the offending path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborts: non-finite gradient on a named parameter.
struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vti
