#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mkid/conductivity.hpp"
#include "mkid/constants.hpp"
#include "mkid/errors.hpp"
#include "mkid/levmar.hpp"

// Temperature dependence of the internal quality factor, and the weighted
// least-squares fit that extracts the superconducting gap from it:
//
//   1/Qi(T) = 1/Qi(0) + (alpha/2) * sigma1(T, Delta) / sigma2(T, Delta)
//
// optionally minus b * ln(T / T_K) for a magnetic-impurity (Kondo-like) loss
// channel.  alpha, the kinetic inductance fraction, is a measured input, not
// a fit parameter.
//
// Identifiability notes, relied on by fit_gap:
//  - b and T_K share an exact flat direction (b * ln T_K is absorbed into
//    1/Qi(0)).  T_K is box-constrained to [10 mK, 10 K] and uncertainties are
//    computed from a pseudo-inverse that drops the flat direction, so the
//    reported errors cover only the constrained combinations.
//  - When every temperature sits in the frozen-out regime (quasiparticle term
//    below the noise) the gap is unconstrained; fit_gap detects this from the
//    gap column of the Jacobian and throws DegenerateData.
//  - Reported uncertainties are rescaled by the reduced chi-square, i.e. the
//    supplied errors are trusted only up to a common factor; scaling every
//    inv_qi_err by the same constant leaves the parameter errors unchanged.

namespace mkid {

struct QiSeries {
    std::vector<double> temperature_k;
    std::vector<double> inv_qi;
    std::vector<double> inv_qi_err;
    double f0_hz = 0.0;
    std::string resonator_id;

    void validate() const {
        if (temperature_k.size() != inv_qi.size() || inv_qi.size() != inv_qi_err.size()) {
            throw InvalidInput("QiSeries: array size mismatch");
        }
        if (temperature_k.size() < 5) {
            throw InvalidInput("QiSeries: need at least 5 temperatures");
        }
        if (!std::isfinite(f0_hz) || !(f0_hz > 0.0)) {
            throw InvalidInput("QiSeries: readout frequency must be positive");
        }
        for (std::size_t i = 0; i < temperature_k.size(); ++i) {
            if (!std::isfinite(temperature_k[i]) || !(temperature_k[i] > 0.0)) {
                throw InvalidInput("QiSeries: temperatures must be positive");
            }
            if (i > 0 && !(temperature_k[i] > temperature_k[i - 1])) {
                throw InvalidInput("QiSeries: temperatures must increase strictly");
            }
            if (!std::isfinite(inv_qi[i]) || !(inv_qi[i] > 0.0)) {
                throw InvalidInput("QiSeries: 1/Qi values must be positive");
            }
            if (!std::isfinite(inv_qi_err[i]) || !(inv_qi_err[i] > 0.0)) {
                throw InvalidInput("QiSeries: errors must be positive");
            }
        }
    }
};

inline double inv_qi_model(double temperature_k, double delta_ev, double inv_qi0,
                           double alpha, double omega_rad_s,
                           const PhysConstants& pc = {}) {
    if (!(alpha > 0.0) || !(alpha <= 1.0)) {
        throw InvalidInput("inv_qi_model: alpha must lie in (0, 1]");
    }
    if (!std::isfinite(inv_qi0) || inv_qi0 < 0.0) {
        throw InvalidInput("inv_qi_model: 1/Qi(0) must be nonnegative");
    }
    const ConductivityRatios c = mattis_bardeen(temperature_k, omega_rad_s, delta_ev, delta_ev, pc);
    return inv_qi0 + 0.5 * alpha * c.sigma1_over_sigman / c.sigma2_over_sigman;
}

inline double inv_qi_model_kondo(double temperature_k, double delta_ev, double inv_qi0,
                                 double alpha, double omega_rad_s, double b, double tk_k,
                                 const PhysConstants& pc = {}) {
    if (!(tk_k > 0.0)) {
        throw InvalidInput("inv_qi_model_kondo: T_K must be positive");
    }
    return inv_qi_model(temperature_k, delta_ev, inv_qi0, alpha, omega_rad_s, pc) -
           b * std::log(temperature_k / tk_k);
}

struct GapFitResult {
    double delta_ev = 0.0;
    double delta_err_ev = 0.0;
    double inv_qi0 = 0.0;
    double inv_qi0_err = 0.0;
    double kondo_b = 0.0;
    double kondo_b_err = 0.0;
    double kondo_tk_k = 0.0;
    double kondo_tk_err_k = 0.0;
    double alpha = 0.0;  // input, carried through for reporting
    double tc_k = 0.0;   // always delta_to_tc(delta_ev)
    double chi2_dof = 0.0;
    double cost = 0.0;
    int iterations = 0;
    bool converged = false;
    bool used_kondo = false;
};

namespace detail {

// Norm of Jacobian column k after projecting out every other column: the
// data's leverage on parameter k alone.  Zero means k is not identifiable.
inline double orthogonal_column_norm(const Eigen::MatrixXd& jac, Eigen::Index k) {
    const Eigen::Index n = jac.cols();
    if (n == 1) return jac.col(k).norm();
    Eigen::MatrixXd others(jac.rows(), n - 1);
    Eigen::Index c = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        if (j != k) others.col(c++) = jac.col(j);
    }
    const Eigen::VectorXd coef = others.colPivHouseholderQr().solve(jac.col(k));
    return (jac.col(k) - others * coef).norm();
}

}  // namespace detail

inline GapFitResult fit_gap(const QiSeries& series, double alpha, bool use_kondo = true,
                            const PhysConstants& pc = {}, const LevMarOptions& opt = {}) {
    series.validate();
    if (!(alpha > 0.0) || !(alpha <= 1.0)) {
        throw InvalidInput("fit_gap: alpha must lie in (0, 1]");
    }
    const std::size_t n = series.temperature_k.size();
    const double omega = 2.0 * pi * series.f0_hz;
    const double t_min = series.temperature_k.front();
    const double t_max = series.temperature_k.back();

    std::vector<ParamMap> maps = {ParamMap::log_positive(), ParamMap::log_positive()};
    if (use_kondo) {
        maps.push_back(ParamMap::identity());
        maps.push_back(ParamMap::box(0.01, 10.0));
    }
    const Eigen::Index npar = static_cast<Eigen::Index>(maps.size());

    Eigen::VectorXd p0(npar);
    // Activation sets in around Delta / 5 k_B below the top temperature.
    p0[0] = maps[0].to_internal(5.0 * pc.k_b * t_max);
    p0[1] = maps[1].to_internal(*std::min_element(series.inv_qi.begin(), series.inv_qi.end()));
    if (use_kondo) {
        // Slope of 1/Qi against ln T over the coldest third, where the
        // quasiparticle term is frozen out, estimates -b.
        const std::size_t k = std::max<std::size_t>(3, n / 3);
        double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double x = std::log(series.temperature_k[i]);
            sx += x;
            sy += series.inv_qi[i];
            sxx += x * x;
            sxy += x * series.inv_qi[i];
        }
        const double det = static_cast<double>(k) * sxx - sx * sx;
        p0[2] = det > 0.0 ? -(static_cast<double>(k) * sxy - sx * sy) / det : 0.0;
        p0[3] = maps[3].to_internal(std::clamp(std::sqrt(t_min * t_max), 0.011, 9.9));
    }

    auto residuals = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        const double delta = maps[0].to_physical(p[0]);
        const double q0 = maps[1].to_physical(p[1]);
        r.resize(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const double t = series.temperature_k[i];
            const double m = use_kondo
                                 ? inv_qi_model_kondo(t, delta, q0, alpha, omega, p[2],
                                                      maps[3].to_physical(p[3]), pc)
                                 : inv_qi_model(t, delta, q0, alpha, omega, pc);
            r[static_cast<Eigen::Index>(i)] = (m - series.inv_qi[i]) / series.inv_qi_err[i];
        }
    };

    const LevMarResult lm = levenberg_marquardt(residuals, p0, opt);

    int rank = 0;
    const Eigen::MatrixXd cov_int = detail::pinv_covariance(lm.jacobian, lm.cost, rank);
    const double col_gap = detail::orthogonal_column_norm(lm.jacobian, 0);
    const double resid_rms =
        std::sqrt(lm.cost / std::max(1.0, static_cast<double>(n) - rank));
    // Effective sigma(ln Delta) given the other parameters free; > 5 means the
    // data leave the gap essentially anywhere within a factor of ~150.  The
    // residuals are already in units of the supplied errors, so even a perfect
    // fit cannot pin ln Delta tighter than 1/col_gap (the Cramer-Rao floor);
    // the realized rms only widens that when the fit is over-dispersed.
    if (!(col_gap > 1e-9 * lm.jacobian.norm()) ||
        std::max(resid_rms, 1.0) / col_gap > 5.0) {
        throw DegenerateData("fit_gap: temperature range does not constrain the gap");
    }
    if (!lm.converged) {
        throw NonConvergence("fit_gap: optimizer did not converge");
    }

    const Eigen::MatrixXd cov = map_covariance(cov_int, lm.params, maps);

    GapFitResult res;
    res.delta_ev = maps[0].to_physical(lm.params[0]);
    res.delta_err_ev = std::sqrt(std::max(0.0, cov(0, 0)));
    res.inv_qi0 = maps[1].to_physical(lm.params[1]);
    res.inv_qi0_err = std::sqrt(std::max(0.0, cov(1, 1)));
    if (use_kondo) {
        res.kondo_b = lm.params[2];
        res.kondo_b_err = std::sqrt(std::max(0.0, cov(2, 2)));
        res.kondo_tk_k = maps[3].to_physical(lm.params[3]);
        res.kondo_tk_err_k = std::sqrt(std::max(0.0, cov(3, 3)));
    }
    res.alpha = alpha;
    res.tc_k = delta_to_tc(res.delta_ev, pc);
    res.chi2_dof = lm.chi2_dof;
    res.cost = lm.cost;
    res.iterations = lm.iterations;
    res.converged = lm.converged;
    res.used_kondo = use_kondo;
    return res;
}

inline double kinetic_fraction(double f_meas_hz, double f_sim_hz) {
    if (!(f_meas_hz > 0.0) || !(f_sim_hz > 0.0) || !(f_meas_hz <= f_sim_hz)) {
        throw InvalidInput("kinetic_fraction: requires 0 < f_meas <= f_sim");
    }
    const double r = f_meas_hz / f_sim_hz;
    return 1.0 - r * r;
}

struct WeightedMean {
    double value = 0.0;
    double error = 0.0;
};

// Plain inverse-variance combination; no scaling for over-dispersion.
inline WeightedMean weighted_mean(const std::vector<double>& values,
                                  const std::vector<double>& errors) {
    if (values.empty() || values.size() != errors.size()) {
        throw InvalidInput("weighted_mean: need equal-sized nonempty arrays");
    }
    double sw = 0.0, swv = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]) || !std::isfinite(errors[i]) || !(errors[i] > 0.0)) {
            throw InvalidInput("weighted_mean: values finite, errors positive");
        }
        const double w = 1.0 / (errors[i] * errors[i]);
        sw += w;
        swv += w * values[i];
    }
    return {swv / sw, 1.0 / std::sqrt(sw)};
}

}  // namespace mkid
