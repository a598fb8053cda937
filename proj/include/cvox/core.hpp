#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace cvox {

// Error taxonomy shared by all modules. The CLI maps categories to exit
// codes: usage/config -> 1, everything else -> 2.
enum class ErrCat {
    usage,
    config,
    data,
    contract,
    io,
    numeric,
};

class Error : public std::runtime_error {
  public:
    Error(ErrCat cat, const std::string& msg) : std::runtime_error(msg), cat_(cat) {}
    ErrCat category() const { return cat_; }

    static Error usage(const std::string& m) { return {ErrCat::usage, m}; }
    static Error config(const std::string& m) { return {ErrCat::config, m}; }
    static Error data(const std::string& m) { return {ErrCat::data, m}; }
    static Error contract(const std::string& m) { return {ErrCat::contract, m}; }
    static Error io(const std::string& m) { return {ErrCat::io, m}; }
    static Error numeric(const std::string& m) { return {ErrCat::numeric, m}; }

  private:
    ErrCat cat_;
};

inline const char* err_cat_name(ErrCat c) {
    switch (c) {
        case ErrCat::usage: return "usage";
        case ErrCat::config: return "config";
        case ErrCat::data: return "data";
        case ErrCat::contract: return "contract";
        case ErrCat::io: return "io";
        case ErrCat::numeric: return "numeric";
    }
    return "unknown";
}

// splitmix64; used both as a seed mixer and as the core of Rng.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
    return splitmix64(s);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

// Deterministic RNG with a fully pinned sample algorithm. std::mt19937_64
// would pin the engine but not the distributions, so uniform/normal are
// implemented here directly.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {
        // decorrelate trivially related seeds
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t index(uint64_t n) {
        // modulo bias negligible for n << 2^64
        return n ? next_u64() % n : 0;
    }

    // standard normal via Box-Muller (no state carried between calls)
    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

  private:
    uint64_t state_;
};

// FNV-1a over raw bytes; used for config hashes and parameter digests.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace cvox
