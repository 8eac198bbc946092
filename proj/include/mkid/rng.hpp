#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "mkid/constants.hpp"
#include "mkid/errors.hpp"

// Seeded random numbers for the synthetic generators.
//
// The raw stream is std::mt19937_64, whose output sequence is pinned
// bit-for-bit by the C++ standard, so fixtures do not depend on the standard
// library build.  The variate transforms (uniform, Box-Muller normal, Knuth
// Poisson) are written out here rather than taken from <random> because
// std::*_distribution algorithms are implementation-defined.  Variates call
// libm (log/cos/sin), so byte-identity of derived streams holds per platform;
// the integer stream itself is portable everywhere.

namespace mkid {

// splitmix64 finalizer; good avalanche for deriving sub-stream seeds.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Decorrelated seed for a named sub-stream of a scenario seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix64(base ^ mix64(stream + 0x6a09e667f3bcc909ull));
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via Box-Muller; generates pairs, caches the second.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * pi * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * pi * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Poisson counts.  Knuth's product method is exact and cheap for the
    // photon-rate range used here (mu <= 50); above that a rounded Gaussian
    // stands in, which the pipeline never exercises.
    long poisson(double mu) {
        if (!(mu >= 0.0)) {
            throw InvalidInput("Rng::poisson: requires mu >= 0");
        }
        if (mu == 0.0) return 0;
        if (mu <= 50.0) {
            const double limit = std::exp(-mu);
            long k = 0;
            double p = 1.0;
            do {
                ++k;
                p *= uniform01();
            } while (p > limit);
            return k - 1;
        }
        const double approx = std::round(mu + std::sqrt(mu) * normal());
        return approx < 0.0 ? 0 : static_cast<long>(approx);
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mkid
