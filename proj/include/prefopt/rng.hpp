#pragma once

#include <cstdint>
#include <random>

namespace prefopt {

// Fixed-width engine plus hand-rolled transforms: std distributions differ across
// standard libraries, these do not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // [0, 1) with 53 random bits
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // unbiased integer in [0, n) by rejection
    std::uint64_t below(std::uint64_t n)
    {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

private:
    std::mt19937_64 engine_;
};

// Stateless counter-based generator: value depends only on (key, counter).
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t counter_index(std::uint64_t key, std::uint64_t counter, std::uint64_t n) noexcept
{
    const std::uint64_t r = splitmix64(splitmix64(key) ^ counter);
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(r) * n) >> 64);
}

} // namespace prefopt
