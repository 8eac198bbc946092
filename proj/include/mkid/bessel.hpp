#pragma once

#include <cmath>

#include "mkid/constants.hpp"
#include "mkid/errors.hpp"

// Exponentially scaled modified Bessel functions of order zero.
//
// These are the only special functions the conductivity model needs, and the
// scaled forms are what the physics uses directly:
//
//   sinh(xi) K0(xi) = 0.5 (1 - e^{-2 xi}) * bessel_k0_scaled(xi)
//   e^{-xi}  I0(xi) =                       bessel_i0_scaled(xi)
//
// so the raw I0/K0 (which overflow/underflow near xi ~ 700) never appear.
//
// Branch layout: ascending power series for x < 8, asymptotic expansion
// truncated at its smallest term for x >= 8.  Accuracy is limited in the
// crossover region x in [6, 20]: the asymptotic truncation floor is ~2e-8
// relative at x = 8 (decaying like e^{-2x}), and the K0 series loses up to
// ~1e-8 to cancellation just below the branch point.  Outside [6, 20] both
// functions are good to 1e-9 relative or better.

namespace mkid {

namespace detail {
inline constexpr double euler_gamma = 0.5772156649015328606065120900824024;
}

// e^{-x} I0(x) for x >= 0.  Decays like 1/sqrt(2 pi x); equals 1 at x = 0.
inline double bessel_i0_scaled(double x) {
    if (!(x >= 0.0)) {
        throw InvalidInput("bessel_i0_scaled: requires x >= 0");
    }
    if (x < 8.0) {
        // I0(x) = sum_k (x^2/4)^k / (k!)^2; all terms positive, no cancellation.
        const double q = 0.25 * x * x;
        double term = 1.0;
        double sum = 1.0;
        for (int k = 1; k < 64; ++k) {
            term *= q / (static_cast<double>(k) * static_cast<double>(k));
            sum += term;
            if (term < sum * 1e-17) break;
        }
        return std::exp(-x) * sum;
    }
    // e^{-x} I0(x) ~ (2 pi x)^{-1/2} sum_k a_k x^{-k},  a_k = a_{k-1} (2k-1)^2 / (8k).
    double term = 1.0;
    double sum = 1.0;
    for (int k = 1; k < 40; ++k) {
        const double next = term * ((2.0 * k - 1.0) * (2.0 * k - 1.0)) / (8.0 * k * x);
        if (next >= term) break;  // past the smallest term; stop before divergence
        term = next;
        sum += term;
        if (term < sum * 1e-17) break;
    }
    return sum / std::sqrt(2.0 * pi * x);
}

// e^{x} K0(x) for x > 0.  Diverges like -ln(x) as x -> 0+.
inline double bessel_k0_scaled(double x) {
    if (!(x > 0.0)) {
        throw InvalidInput("bessel_k0_scaled: requires x > 0");
    }
    if (x < 8.0) {
        // K0(x) = -(ln(x/2) + gamma) I0(x) + sum_{k>=1} (x^2/4)^k / (k!)^2 H_k,
        // H_k the k-th harmonic number.  Mild cancellation near the branch
        // boundary costs at most ~1e-9 relative (documented crossover).
        const double q = 0.25 * x * x;
        double term = 1.0;
        double i0 = 1.0;
        double corr = 0.0;
        double h = 0.0;
        for (int k = 1; k < 64; ++k) {
            term *= q / (static_cast<double>(k) * static_cast<double>(k));
            h += 1.0 / k;
            i0 += term;
            corr += term * h;
            if (term * 8.0 < i0 * 1e-18) break;
        }
        const double k0 = -(std::log(0.5 * x) + detail::euler_gamma) * i0 + corr;
        return std::exp(x) * k0;
    }
    // e^{x} K0(x) ~ sqrt(pi / (2x)) sum_k (-1)^k a_k x^{-k}, same a_k as I0.
    double term = 1.0;
    double sum = 1.0;
    for (int k = 1; k < 40; ++k) {
        const double mag = std::abs(term) * ((2.0 * k - 1.0) * (2.0 * k - 1.0)) / (8.0 * k * x);
        if (mag >= std::abs(term)) break;
        term = (term > 0.0 ? -mag : mag);
        sum += term;
        if (mag < std::abs(sum) * 1e-17) break;
    }
    return std::sqrt(pi / (2.0 * x)) * sum;
}

}  // namespace mkid
