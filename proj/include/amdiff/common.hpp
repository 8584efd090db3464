#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace amdiff {

/// Bad configuration, schema violation, or impossible plan. CLI exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed files, missing data, or geometry mismatches. CLI exit code 3.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numeric divergence or undefined metric. CLI exit code 4.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Index3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

inline long long numel(const Index3& d) {
    return static_cast<long long>(d[0]) * d[1] * d[2];
}

/// Flat index with x fastest-varying: index = x + nx*(y + ny*z).
inline long long flat_index(const Index3& dims, int x, int y, int z) {
    return x + static_cast<long long>(dims[0]) * (y + static_cast<long long>(dims[1]) * z);
}

}  // namespace amdiff
