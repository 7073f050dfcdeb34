#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dsm {

// Error taxonomy. The CLI maps these onto exit codes:
// usage/contract violations -> 1, bad input data -> 2, numeric failure -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke an API precondition (shape mismatch, bad argument).
struct ContractError : Error {
    using Error::Error;
};

// External input (file, dataset, config) is malformed or inconsistent.
struct DataError : Error {
    using Error::Error;
};

// NaN/Inf or other numerical breakdown during computation.
struct NumericError : Error {
    using Error::Error;
};

// Bad command-line invocation.
struct UsageError : Error {
    using Error::Error;
};

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(Dtype dt) {
    return dt == Dtype::F32 ? "f32" : "f64";
}

inline size_t dtype_size(Dtype dt) {
    return dt == Dtype::F32 ? 4 : 8;
}

Dtype dtype_from_name(const std::string& name);

// Deterministic PRNG built on splitmix64 so that seeded runs reproduce
// bit-for-bit across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // Standard normal via Box-Muller; one spare value cached.
    double normal();

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    bool bernoulli(double p) {
        return uniform() < p;
    }

    // Hash-combine for deriving per-item seeds from a master seed.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace dsm
