#pragma once

#include <cmath>
#include <cstdint>

namespace sdar {

namespace detail {
// 64-bit finalizer used by the splitmix64 generator. Pure integer math, so
// the raw stream is identical on every platform.
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Derives an independent stream seed from a base seed and a stream label.
/// Used to split one run seed into per-step / per-sample streams so that
/// serial and parallel execution orders draw identical values.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return detail::mix64(seed + 0x9E3779B97F4A7C15ULL * (stream + 1));
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(seed, a), b);
}

/// Counter-based splitmix64 generator. State is a single counter advanced by
/// the golden-ratio increment; each output is mix64 of the state. The stream
/// for a given seed is byte-identical across runs and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return detail::mix64(state_);
    }

    /// Uniform double in [0, 1), 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; consumes two draws per call.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    /// Integer in [0, n); fixed-point multiply keeps it deterministic.
    int64_t range(int64_t n) {
        const unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) *
                                       static_cast<unsigned __int128>(n);
        return static_cast<int64_t>(wide >> 64);
    }

    /// Independent child stream labeled by `stream`; does not advance state.
    Rng fork(uint64_t stream) const { return Rng(derive_seed(state_, stream)); }

private:
    uint64_t state_;
};

}  // namespace sdar
