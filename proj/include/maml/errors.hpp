#pragma once

#include <stdexcept>
#include <string>

namespace maml {

// Invalid or inconsistent configuration; rejected before heavy work starts.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// File read/write failures and refused overwrites.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

// Malformed or out-of-contract data (non-finite voxels, shape mismatches).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace maml
