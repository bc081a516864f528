#ifndef CYTOMATCH_DETAIL_RANDOM_HPP
#define CYTOMATCH_DETAIL_RANDOM_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

/**
 * @file random.hpp
 *
 * @brief Platform-independent random draws.
 *
 * Every stochastic step in cytomatch is driven by `std::mt19937_64`, whose output sequence is fixed by the C++ standard.
 * The standard distributions (`std::uniform_int_distribution`, `std::normal_distribution`, `std::shuffle`) are
 * implementation-defined, so the transforms below are written out explicitly to keep seeded runs identical across toolchains.
 */

namespace cytomatch {

using Rng = std::mt19937_64;

namespace detail {

/** Uniform on [0, 1) with 53 bits of resolution. */
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

/** Uniform integer on [0, n) by rejection, free of modulo bias. */
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t draw = rng();
    while (draw >= limit) {
        draw = rng();
    }
    return draw % n;
}

/** Standard normal via Box-Muller; consumes exactly two engine outputs. */
inline double standard_normal(Rng& rng) {
    const double u1 = 1.0 - uniform01(rng); // (0, 1]
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/** Fisher-Yates permutation of 0..n-1. */
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(out[i - 1], out[j]);
    }
    return out;
}

}

}

#endif
