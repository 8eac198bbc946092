#pragma once

#include <cmath>

#include "mkid/bessel.hpp"
#include "mkid/constants.hpp"
#include "mkid/errors.hpp"

// Thin-film complex conductivity in the low-frequency, low-temperature limit
// (Mattis-Bardeen), expressed as ratios to the normal-state conductivity:
//
//   sigma1/sigman = (4 Delta / hbar w) e^{-Delta0 / kB T} sinh(xi) K0(xi)
//   sigma2/sigman = (pi Delta / hbar w) [1 - 2 e^{-Delta0 / kB T} e^{-xi} I0(xi)]
//
// with xi = hbar w / (2 kB T).  Both Bessel factors are evaluated in scaled
// form, so no intermediate overflows for any xi.

namespace mkid {

struct ConductivityRatios {
    double sigma1_over_sigman = 0.0;
    double sigma2_over_sigman = 0.0;
    // False when hbar*w or kB*T is not small against delta0 (threshold: half).
    // Out-of-regime inputs are still evaluated; the flag is the warning.
    bool in_regime = true;
};

inline ConductivityRatios mattis_bardeen(double temperature_k, double omega_rad_s,
                                         double delta_ev, double delta0_ev,
                                         const PhysConstants& pc = {}) {
    if (!(temperature_k > 0.0) || !(omega_rad_s > 0.0) ||
        !(delta_ev > 0.0) || !(delta0_ev > 0.0)) {
        throw InvalidInput("mattis_bardeen: T, omega, delta, delta0 must be positive");
    }
    const double hw = pc.hbar * omega_rad_s;
    const double kt = pc.k_b * temperature_k;
    const double xi = hw / (2.0 * kt);
    const double boltz = std::exp(-delta0_ev / kt);
    // sinh(xi) K0(xi) = 0.5 (1 - e^{-2 xi}) * [e^{xi} K0(xi)]
    const double sinh_k0 = 0.5 * (1.0 - std::exp(-2.0 * xi)) * bessel_k0_scaled(xi);
    ConductivityRatios out;
    out.sigma1_over_sigman = (4.0 * delta_ev / hw) * boltz * sinh_k0;
    out.sigma2_over_sigman = (pi * delta_ev / hw) * (1.0 - 2.0 * boltz * bessel_i0_scaled(xi));
    out.in_regime = (hw < 0.5 * delta0_ev) && (kt < 0.5 * delta0_ev);
    return out;
}

// BCS-style weak-coupling relation 2 Delta = 3.5 kB Tc, solved for Tc [K].
inline double delta_to_tc(double delta_ev, const PhysConstants& pc = {}) {
    if (!(delta_ev > 0.0)) {
        throw InvalidInput("delta_to_tc: requires delta > 0");
    }
    return 2.0 * delta_ev / (3.5 * pc.k_b);
}

}  // namespace mkid
