#pragma once

#include <stdexcept>
#include <string>

namespace smoa {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes (messages name both shapes).
struct ShapeError : Error {
    using Error::Error;
};

// Violated call contract (bad k, non-scalar loss, empty batch, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid model / experiment configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Out-of-range token id or class label.
struct IndexError : Error {
    using Error::Error;
};

// Malformed serialized data (JSONL line, checkpoint header, ...).
struct ParseError : Error {
    using Error::Error;
};

// Bad runtime input (overlength sequence, missing file, ...).
struct InputError : Error {
    using Error::Error;
};

}  // namespace smoa
