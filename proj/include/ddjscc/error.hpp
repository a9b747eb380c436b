#pragma once

#include <stdexcept>
#include <string>

namespace ddjscc {

// Error taxonomy used across the library. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/length mismatch between tensors or vectors.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Caller broke a precondition (bad range, empty input, wrong mode).
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Mathematically degenerate input, e.g. normalizing an all-zero code.
struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& msg) : Error(msg) {}
};

// Malformed file contents (PPM headers, checkpoints, CSV).
struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Training produced a non-finite loss; message carries diagnostic state.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

// Evaluation protocol violation, e.g. a fixed model queried at a foreign n.
struct ProtocolError : Error {
    explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

}  // namespace ddjscc
