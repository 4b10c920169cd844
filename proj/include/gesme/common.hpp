#pragma once

// Shared error types, shape helpers and deterministic RNG seeding used by
// every module in the library.

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gesme {

using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/rank violations (wrong extents, bad permutation, ...).
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration values (negative gamma, even filter length, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// API misuse (backward on a non-scalar, unknown task id, ...).
class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Malformed input data files.
class IngestError : public Error {
public:
    explicit IngestError(const std::string& msg) : Error(msg) {}
};

// Filesystem / serialization failures (missing file, truncated blob, ...).
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Row-major strides.
inline Shape shape_strides(const Shape& s) {
    Shape st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Stable 64-bit hash, used to derive independent per-component RNG streams
// from one user seed so that shared components initialize identically across
// model variants.
inline std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = 0) {
    std::uint64_t h = 14695981039346656037ull ^ (seed * 0x9e3779b97f4a7c15ull);
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace gesme
