#pragma once

// Physical constants in eV-based units (CODATA 2018, exact by definition).

namespace mkid {

// Boltzmann constant [eV / K].
inline constexpr double k_boltzmann_ev_per_k = 8.617333262e-5;

// Reduced Planck constant [eV s].
inline constexpr double hbar_ev_s = 6.582119569e-16;

// Pi; <numbers> is avoided in headers that must stay cheap to include.
inline constexpr double pi = 3.141592653589793238462643383279502884;

// Bundled view used by code that takes the constants as a parameter block.
struct PhysConstants {
    double k_b = k_boltzmann_ev_per_k;   // [eV/K]
    double hbar = hbar_ev_s;             // [eV s]
};

}  // namespace mkid
