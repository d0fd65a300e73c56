#ifndef AWMARK_RNG_HPP
#define AWMARK_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace awmark {

// splitmix64; used to derive independent substreams from a base seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 0x51AF9E3B));
}

// Seeded RNG with a bit-exact stream: mt19937_64 plus hand-rolled
// distributions, so results do not depend on the standard library's
// distribution implementations.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (two uniforms per draw, no caching)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    int bit() { return static_cast<int>(raw() >> 63); }

    // uniform integer in [0, n), unbiased
    std::uint64_t integer(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = raw();
        while (r >= limit) r = raw();
        return r % n;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace awmark

#endif
