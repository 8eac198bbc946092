#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <unordered_map>
#include <vector>

#include "mkid/constants.hpp"
#include "mkid/errors.hpp"

// Discrete Fourier transform for arbitrary lengths.
//
// Power-of-two lengths run a plain iterative Cooley-Tukey FFT; everything
// else goes through Bluestein's chirp-z algorithm on a padded power-of-two
// convolution.  Conventions: forward is unnormalized, inverse carries 1/N.
// Plans (twiddle/chirp tables) are cached per length and per thread, so
// transforms are safe to run concurrently from different threads.
//
// Chirp phases are reduced modulo 2N before the trig call; without that the
// k^2 argument loses enough precision at N ~ 6000 to break the 1e-12
// round-trip requirement.

namespace mkid {

using cplx = std::complex<double>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

struct DftPlan {
    std::size_t n = 0;             // transform length
    std::size_t m = 0;             // FFT workhorse length (power of two)
    std::vector<cplx> twiddle;     // exp(-2 pi i j / m), j < m/2
    std::vector<cplx> chirp;       // exp(-i pi n^2 / N) for Bluestein, empty otherwise
    std::vector<cplx> chirp_fft;   // FFT of the wrapped conjugate chirp
};

// In-place radix-2 FFT using the plan's twiddle table (size m).
inline void fft_pow2(std::vector<cplx>& a, const DftPlan& plan, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len >> 1;
        const std::size_t step = n / len;
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t j = 0; j < half; ++j) {
                cplx w = plan.twiddle[j * step];
                if (inverse) w = std::conj(w);
                const cplx u = a[i + j];
                const cplx v = a[i + j + half] * w;
                a[i + j] = u + v;
                a[i + j + half] = u - v;
            }
        }
    }
    if (inverse) {
        const double scale = 1.0 / static_cast<double>(n);
        for (auto& z : a) z *= scale;
    }
}

inline const DftPlan& plan_for(std::size_t n) {
    thread_local std::unordered_map<std::size_t, std::unique_ptr<DftPlan>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return *it->second;

    auto plan = std::make_unique<DftPlan>();
    plan->n = n;
    if (is_pow2(n)) {
        plan->m = n;
    } else {
        std::size_t m = 1;
        while (m < 2 * n - 1) m <<= 1;
        plan->m = m;
    }
    plan->twiddle.resize(plan->m / 2);
    for (std::size_t j = 0; j < plan->m / 2; ++j) {
        const double ang = -2.0 * pi * static_cast<double>(j) / static_cast<double>(plan->m);
        plan->twiddle[j] = {std::cos(ang), std::sin(ang)};
    }
    if (!is_pow2(n)) {
        plan->chirp.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            // k^2 mod 2N keeps the phase argument small and exact.
            const std::size_t k2 = (k * k) % (2 * n);
            const double ang = -pi * static_cast<double>(k2) / static_cast<double>(n);
            plan->chirp[k] = {std::cos(ang), std::sin(ang)};
        }
        std::vector<cplx> b(plan->m, cplx{0.0, 0.0});
        b[0] = std::conj(plan->chirp[0]);
        for (std::size_t k = 1; k < n; ++k) {
            b[k] = std::conj(plan->chirp[k]);
            b[plan->m - k] = b[k];
        }
        fft_pow2(b, *plan, false);
        plan->chirp_fft = std::move(b);
    }
    const DftPlan& ref = *plan;
    cache.emplace(n, std::move(plan));
    return ref;
}

inline std::vector<cplx> dft_dispatch(const std::vector<cplx>& x, bool inverse) {
    const std::size_t n = x.size();
    if (n == 0) throw InvalidInput("dft: empty input");
    if (n == 1) return x;
    const DftPlan& plan = plan_for(n);

    if (is_pow2(n)) {
        std::vector<cplx> a = x;
        fft_pow2(a, plan, inverse);
        return a;
    }

    // Bluestein: X_k = c_k * IFFT(FFT(x c) . FFT(conj c, wrapped))_k, with the
    // whole pipeline conjugated for the inverse transform.
    std::vector<cplx> a(plan.m, cplx{0.0, 0.0});
    for (std::size_t k = 0; k < n; ++k) {
        const cplx c = inverse ? std::conj(plan.chirp[k]) : plan.chirp[k];
        a[k] = x[k] * c;
    }
    fft_pow2(a, plan, false);
    if (inverse) {
        for (std::size_t j = 0; j < plan.m; ++j) a[j] *= std::conj(plan.chirp_fft[j]);
    } else {
        for (std::size_t j = 0; j < plan.m; ++j) a[j] *= plan.chirp_fft[j];
    }
    fft_pow2(a, plan, true);

    std::vector<cplx> out(n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
        const cplx c = inverse ? std::conj(plan.chirp[k]) : plan.chirp[k];
        out[k] = a[k] * c;
        if (inverse) out[k] *= inv_n;
    }
    return out;
}

}  // namespace detail

// Forward DFT, X_k = sum_n x_n e^{-2 pi i n k / N} (unnormalized).
inline std::vector<cplx> dft(const std::vector<cplx>& x) {
    return detail::dft_dispatch(x, false);
}

inline std::vector<cplx> dft(const std::vector<double>& x) {
    std::vector<cplx> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = cplx{x[i], 0.0};
    return detail::dft_dispatch(z, false);
}

// Inverse DFT with 1/N normalization; idft(dft(x)) == x.
inline std::vector<cplx> idft(const std::vector<cplx>& x) {
    return detail::dft_dispatch(x, true);
}

}  // namespace mkid
