#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace docparse {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto process exit codes (see cli.hpp).
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shapes do not line up (dim mismatch, bad rank, ...).
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

/// A documented precondition was violated.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

/// Malformed DTF file; carries the byte offset where parsing failed.
class FormatError : public Error {
public:
    FormatError(const std::string& msg, uint64_t byte_offset)
        : Error("format error at byte " + std::to_string(byte_offset) + ": " + msg),
          offset(byte_offset) {}
    uint64_t offset;
};

/// Training diverged (NaN/inf loss).
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error("numerical error: " + msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the library flows through this, seeded
// explicitly; nothing reads ambient state.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2)));
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits; identical on every platform.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive, rejection-sampled (no modulo bias).
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) throw ContractError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<int64_t>(gen_());  // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return lo + static_cast<int64_t>(x % span);
    }

private:
    std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Parallelism cap. DOCPARSE_THREADS limits internal parallelism; kernels are
// bitwise deterministic regardless of the thread count.
// ---------------------------------------------------------------------------

inline int max_threads() {
    static const int cached = [] {
        if (const char* env = std::getenv("DOCPARSE_THREADS")) {
            int n = std::atoi(env);
            if (n >= 1) return n;
        }
        return 0;  // 0 = library default
    }();
    return cached;
}

}  // namespace docparse
