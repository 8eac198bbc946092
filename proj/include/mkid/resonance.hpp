#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <string>
#include <vector>

#include "mkid/constants.hpp"
#include "mkid/errors.hpp"
#include "mkid/levmar.hpp"
#include "mkid/poly.hpp"

// Forward transmission of a notch-type resonator and the fit that extracts
// its parameters from a complex sweep.
//
// Ideal line shape:      S21(f) = 1 - (Q/Qc) / (1 + 2 j Q (f - f0) / f0)
// With impedance
// mismatch + background: S21(f) = bg(f) (1 - (Q/Qc) e^{j phi0} / (1 + 2 j Q x))
//
// where bg is a complex polynomial in f.  On the ideal locus the points trace
// a circle of radius Q / (2 Qc) centered at 1 - (Q/(2Qc)) e^{j phi0}.

namespace mkid {

struct SweepMeta {
    std::string resonator_id;
    std::optional<double> temperature_k;
    std::optional<double> power_dbm;
};

struct ComplexSweep {
    std::vector<double> freq_hz;
    std::vector<std::complex<double>> s21;
    SweepMeta meta;

    void validate() const {
        if (freq_hz.size() != s21.size()) {
            throw InvalidInput("ComplexSweep: frequency/value size mismatch");
        }
        if (freq_hz.size() < 16) {
            throw InvalidInput("ComplexSweep: need at least 16 points");
        }
        for (std::size_t i = 0; i < freq_hz.size(); ++i) {
            if (!std::isfinite(freq_hz[i]) || !std::isfinite(s21[i].real()) ||
                !std::isfinite(s21[i].imag())) {
                throw InvalidInput("ComplexSweep: non-finite entry");
            }
            if (i > 0 && !(freq_hz[i] > freq_hz[i - 1])) {
                throw InvalidInput("ComplexSweep: frequencies must increase strictly");
            }
        }
    }
};

inline std::complex<double> s21_ideal(double f, double f0, double q, double qc) {
    const std::complex<double> den{1.0, 2.0 * q * (f - f0) / f0};
    return 1.0 - (q / qc) / den;
}

inline std::complex<double> s21_resonance(double f, double f0, double q, double qc,
                                          double phi0) {
    const std::complex<double> den{1.0, 2.0 * q * (f - f0) / f0};
    return 1.0 - (q / qc) * std::polar(1.0, phi0) / den;
}

struct ResonanceParams {
    double f0_hz = 0.0;
    double q = 0.0;
    double qc = 0.0;
    double phi0 = 0.0;
    ScaledPoly<std::complex<double>> background = ScaledPoly<std::complex<double>>::constant(1.0);
};

inline std::complex<double> s21_model(double f, const ResonanceParams& p) {
    return p.background.eval(f) * s21_resonance(f, p.f0_hz, p.q, p.qc, p.phi0);
}

// Internal quality factor from 1/Q = 1/Qi + 1/Qc.
inline double q_internal(double q, double qc) {
    if (!(q > 0.0) || !(qc > 0.0)) {
        throw InvalidInput("q_internal: quality factors must be positive");
    }
    if (q >= qc) {
        throw InvalidInput("q_internal: requires q < qc");
    }
    return q * qc / (qc - q);
}

struct ResonanceErrors {
    double f0_hz = 0.0;
    double q = 0.0;
    double qc = 0.0;
    double qi = 0.0;
    double phi0 = 0.0;
};

struct ResonanceFit {
    ResonanceParams params;
    double qi = 0.0;  // NaN when the fit lands at q >= qc
    ResonanceErrors errors;
    bool converged = false;
    double cost = 0.0;      // sum of squared stacked Re/Im residuals
    double chi2_dof = 0.0;  // cost / (2 n_points - n_params)
    int iterations = 0;
};

struct ResonanceFitConfig {
    int background_degree = 1;  // complex polynomial degree of bg(f)
    double dip_threshold = 0.95;
    LevMarOptions optimizer;
};

namespace detail {

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw InvalidInput("median of empty range");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
        std::nth_element(v.begin(), v.begin() + mid, v.begin() + mid);
        m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
    }
    return m;
}

}  // namespace detail

// Rough starting point from sweep geometry: dip position, half-depth width,
// off-resonance baseline.  Accuracy contract is loose (factor ~2 on Q); its
// job is to put the optimizer in the right basin.
inline ResonanceParams estimate_initial(const ComplexSweep& sweep,
                                        const ResonanceFitConfig& cfg = {}) {
    sweep.validate();
    const std::size_t n = sweep.freq_hz.size();

    std::vector<double> mag(n);
    for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(sweep.s21[i]);

    const std::size_t imin =
        static_cast<std::size_t>(std::min_element(mag.begin(), mag.end()) - mag.begin());
    if (!(mag[imin] < cfg.dip_threshold * detail::median_of(mag))) {
        throw NoDipFound("estimate_initial: no resonance dip in sweep");
    }

    // Off-resonance baseline from the outer 10% on each side.
    const std::size_t wing = std::max<std::size_t>(2, n / 10);
    std::vector<double> wing_re, wing_im, wing_mag;
    for (std::size_t i = 0; i < n; ++i) {
        if (i < wing || i >= n - wing) {
            wing_re.push_back(sweep.s21[i].real());
            wing_im.push_back(sweep.s21[i].imag());
            wing_mag.push_back(mag[i]);
        }
    }
    const double base = detail::median_of(wing_mag);
    const std::complex<double> c0{detail::median_of(wing_re), detail::median_of(wing_im)};

    const double f0 = sweep.freq_hz[imin];
    // Width at the half-power level between dip floor and baseline.
    const double level2 = 0.5 * (mag[imin] * mag[imin] + base * base);
    double f_lo = sweep.freq_hz.front();
    double f_hi = sweep.freq_hz.back();
    for (std::size_t i = imin; i-- > 0;) {
        if (mag[i] * mag[i] > level2) {
            const double m2a = mag[i] * mag[i], m2b = mag[i + 1] * mag[i + 1];
            const double t = (m2a - level2) / std::max(m2a - m2b, 1e-300);
            f_lo = sweep.freq_hz[i] + t * (sweep.freq_hz[i + 1] - sweep.freq_hz[i]);
            break;
        }
    }
    for (std::size_t i = imin + 1; i < n; ++i) {
        if (mag[i] * mag[i] > level2) {
            const double m2a = mag[i] * mag[i], m2b = mag[i - 1] * mag[i - 1];
            const double t = (m2a - level2) / std::max(m2a - m2b, 1e-300);
            f_hi = sweep.freq_hz[i] - t * (sweep.freq_hz[i] - sweep.freq_hz[i - 1]);
            break;
        }
    }
    const double width = std::max(f_hi - f_lo, (sweep.freq_hz.back() - sweep.freq_hz.front()) * 1e-4);
    const double q = std::clamp(f0 / width, 10.0, 1e8);
    const double depth = std::clamp(1.0 - mag[imin] / std::max(base, 1e-300), 0.01, 0.99);

    ResonanceParams p;
    p.f0_hz = f0;
    p.q = q;
    p.qc = q / depth;
    p.phi0 = 0.0;
    p.background.center = 0.5 * (sweep.freq_hz.front() + sweep.freq_hz.back());
    p.background.scale = std::max(0.5 * (sweep.freq_hz.back() - sweep.freq_hz.front()), 1.0);
    p.background.coeffs.assign(static_cast<std::size_t>(cfg.background_degree) + 1,
                               std::complex<double>{0.0, 0.0});
    p.background.coeffs[0] = c0;
    return p;
}

// Full least-squares fit of the mismatched-resonance model with a complex
// polynomial background.  Residuals are the stacked real and imaginary parts.
// Q and Qc move in log space; phi0 is wrapped into (-pi, pi] afterwards.
inline ResonanceFit fit_resonance(const ComplexSweep& sweep,
                                  const ResonanceFitConfig& cfg = {}) {
    const ResonanceParams init = estimate_initial(sweep, cfg);
    const std::size_t n = sweep.freq_hz.size();
    const int deg = cfg.background_degree;
    const int npar = 4 + 2 * (deg + 1);
    if (2 * static_cast<int>(n) <= npar) {
        throw InvalidInput("fit_resonance: not enough points for the model");
    }

    const double fc = init.background.center;
    const double fs = init.background.scale;

    // internal layout: [u_f0, ln q, ln qc, phi0, re c0, im c0, re c1, ...]
    Eigen::VectorXd p0(npar);
    p0[0] = (init.f0_hz - fc) / fs;
    p0[1] = std::log(init.q);
    p0[2] = std::log(init.qc);
    p0[3] = init.phi0;
    for (int k = 0; k <= deg; ++k) {
        p0[4 + 2 * k] = init.background.coeffs[static_cast<std::size_t>(k)].real();
        p0[5 + 2 * k] = init.background.coeffs[static_cast<std::size_t>(k)].imag();
    }

    auto unpack = [&](const Eigen::VectorXd& p) {
        ResonanceParams out;
        out.f0_hz = fc + fs * p[0];
        out.q = std::exp(p[1]);
        out.qc = std::exp(p[2]);
        out.phi0 = p[3];
        out.background.center = fc;
        out.background.scale = fs;
        out.background.coeffs.resize(static_cast<std::size_t>(deg) + 1);
        for (int k = 0; k <= deg; ++k) {
            out.background.coeffs[static_cast<std::size_t>(k)] = {p[4 + 2 * k], p[5 + 2 * k]};
        }
        return out;
    };

    auto residuals = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        const ResonanceParams m = unpack(p);
        r.resize(2 * static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const std::complex<double> diff = s21_model(sweep.freq_hz[i], m) - sweep.s21[i];
            r[2 * static_cast<Eigen::Index>(i)] = diff.real();
            r[2 * static_cast<Eigen::Index>(i) + 1] = diff.imag();
        }
    };

    const LevMarResult lm = levenberg_marquardt(residuals, p0, cfg.optimizer);
    if (!lm.covariance_ok) {
        throw IllConditioned("fit_resonance: singular normal equations at the solution");
    }

    ResonanceFit fit;
    fit.params = unpack(lm.params);
    // phi0 is 2 pi periodic in the model; report the principal value.
    fit.params.phi0 = std::remainder(fit.params.phi0, 2.0 * pi);
    if (fit.params.phi0 <= -pi) fit.params.phi0 += 2.0 * pi;
    fit.converged = lm.converged;
    fit.cost = lm.cost;
    fit.chi2_dof = lm.chi2_dof;
    fit.iterations = lm.iterations;

    fit.errors.f0_hz = fs * std::sqrt(std::max(0.0, lm.covariance(0, 0)));
    fit.errors.q = fit.params.q * std::sqrt(std::max(0.0, lm.covariance(1, 1)));
    fit.errors.qc = fit.params.qc * std::sqrt(std::max(0.0, lm.covariance(2, 2)));
    fit.errors.phi0 = std::sqrt(std::max(0.0, lm.covariance(3, 3)));

    if (fit.params.q < fit.params.qc) {
        fit.qi = q_internal(fit.params.q, fit.params.qc);
        // qi = (1/q - 1/qc)^{-1}: propagate the (ln q, ln qc) block.
        const double dq = fit.qi * fit.qi / fit.params.q;    // d qi / d ln q
        const double dqc = -fit.qi * fit.qi / fit.params.qc; // d qi / d ln qc
        const double var = dq * dq * lm.covariance(1, 1) + dqc * dqc * lm.covariance(2, 2) +
                           2.0 * dq * dqc * lm.covariance(1, 2);
        fit.errors.qi = std::sqrt(std::max(0.0, var));
    } else {
        fit.qi = std::nan("");
        fit.errors.qi = std::nan("");
    }
    return fit;
}

}  // namespace mkid
