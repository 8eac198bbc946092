#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mkid/errors.hpp"
#include "mkid/levmar.hpp"
#include "mkid/rng.hpp"

// Photon-number spectrum: the filtered-amplitude distribution of a coherent
// source is a Poisson-weighted sum of Gaussians,
//
//   density(x) = A * sum_{n=0}^{n_max} P(n; mu) * G(x; n*e_gamma + shift, sigma)
//
// with P the Poisson mass and G the normal density.  The width sigma is a
// measured detector property (optimum-filter resolution), never fitted; the
// per-photon spacing e_gamma, the offset shift, the mean photon number mu and
// the counts scale A are fitted to a binned histogram with Poisson errors.

namespace mkid {

struct SpectrumModel {
    double mu = 1.0;         // mean photon number
    double sigma = 1.0;      // Gaussian width, amplitude units
    double amplitude = 1.0;  // counts scale (integral of the density)
    double shift = 0.0;      // zero-photon peak position
    double e_gamma = 1.0;    // amplitude units per photon
    int n_max = 30;          // highest photon number in the sum

    // Truncation rule: keeps > 1 - 1e-8 of the Poisson mass.
    static int default_n_max(double mu) {
        const double m = std::max(mu, 0.0);
        return std::max(30, static_cast<int>(std::ceil(m + 10.0 * std::sqrt(m) + 10.0)));
    }

    void validate() const {
        if (!(mu > 0.0) || mu > 700.0) {
            // exp(-mu) must stay representable for the term recursion
            throw InvalidInput("SpectrumModel: mu must lie in (0, 700]");
        }
        if (!(sigma > 0.0) || !std::isfinite(sigma)) {
            throw InvalidInput("SpectrumModel: sigma must be positive");
        }
        if (!(amplitude > 1e-5)) {
            throw InvalidInput("SpectrumModel: amplitude must exceed 1e-5");
        }
        if (!(shift >= 0.0) || !(shift <= 1.0)) {
            throw InvalidInput("SpectrumModel: shift must lie in [0, 1]");
        }
        if (!(e_gamma > 0.0) || !std::isfinite(e_gamma)) {
            throw InvalidInput("SpectrumModel: e_gamma must be positive");
        }
        if (n_max < static_cast<int>(std::ceil(mu + 6.0 * std::sqrt(mu)))) {
            throw InvalidInput("SpectrumModel: n_max truncates too much Poisson mass");
        }
    }
};

struct Histogram {
    std::vector<double> bin_edges;  // strictly increasing, counts.size() + 1
    std::vector<double> counts;
    std::vector<double> errors;  // max(1, sqrt(count)): Poisson with unit floor

    void validate() const {
        if (counts.empty() || bin_edges.size() != counts.size() + 1 ||
            errors.size() != counts.size()) {
            throw InvalidInput("Histogram: inconsistent array sizes");
        }
        for (std::size_t i = 0; i + 1 < bin_edges.size(); ++i) {
            if (!(bin_edges[i + 1] > bin_edges[i])) {
                throw InvalidInput("Histogram: bin edges must increase strictly");
            }
        }
        for (std::size_t i = 0; i < counts.size(); ++i) {
            if (!(counts[i] >= 0.0) || !(errors[i] > 0.0)) {
                throw InvalidInput("Histogram: counts nonnegative, errors positive");
            }
        }
    }

    double total() const {
        double t = 0.0;
        for (const double c : counts) t += c;
        return t;
    }
};

namespace detail {

inline double normal_pdf(double x, double mean, double sigma) {
    const double z = (x - mean) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * pi));
}

inline double normal_cdf(double x, double mean, double sigma) {
    return 0.5 * std::erfc(-(x - mean) / (sigma * std::sqrt(2.0)));
}

// acc = sum_{n=0}^{n_max} P(n; mu) * term(n), with the Poisson mass carried
// by recursion p_{n+1} = p_n * mu / (n + 1).
template <class TermFn>
inline double poisson_weighted_sum(double mu, int n_max, TermFn term) {
    double p = std::exp(-mu);
    double acc = 0.0;
    for (int n = 0; n <= n_max; ++n) {
        acc += p * term(n);
        p *= mu / static_cast<double>(n + 1);
    }
    return acc;
}

}  // namespace detail

inline double model_density(double off, const SpectrumModel& m) {
    m.validate();
    return m.amplitude * detail::poisson_weighted_sum(m.mu, m.n_max, [&](int n) {
        return detail::normal_pdf(off, n * m.e_gamma + m.shift, m.sigma);
    });
}

// Expected events in [lo, hi]: the density integrated via normal CDF
// differences, exact per Gaussian component.
inline double model_bin_content(double lo, double hi, const SpectrumModel& m) {
    m.validate();
    if (!(hi > lo)) throw InvalidInput("model_bin_content: needs hi > lo");
    return m.amplitude * detail::poisson_weighted_sum(m.mu, m.n_max, [&](int n) {
        const double c = n * m.e_gamma + m.shift;
        return detail::normal_cdf(hi, c, m.sigma) - detail::normal_cdf(lo, c, m.sigma);
    });
}

// Per event: n ~ Poisson(mu), then x ~ Normal(n*e_gamma + shift, sigma).
// sigma = 0 is allowed and produces the bare comb.
inline std::vector<double> simulate_spectrum(const SpectrumModel& m, int n_events,
                                             std::uint64_t seed) {
    if (!(m.mu >= 0.0) || !(m.sigma >= 0.0) || !(m.e_gamma > 0.0)) {
        throw InvalidInput("simulate_spectrum: needs mu >= 0, sigma >= 0, e_gamma > 0");
    }
    if (n_events < 0) throw InvalidInput("simulate_spectrum: negative event count");
    Rng rng(seed);
    std::vector<double> out(static_cast<std::size_t>(n_events));
    for (auto& x : out) {
        const double n = static_cast<double>(rng.poisson(m.mu));
        x = n * m.e_gamma + m.shift;
        if (m.sigma > 0.0) x += m.sigma * rng.normal();
    }
    return out;
}

inline Histogram make_histogram(const std::vector<double>& values,
                                const std::vector<double>& edges) {
    if (values.empty()) throw EmptyHistogram("make_histogram: no events");
    if (edges.size() < 2) throw InvalidInput("make_histogram: need at least one bin");
    Histogram h;
    h.bin_edges = edges;
    h.counts.assign(edges.size() - 1, 0.0);
    for (const double v : values) {
        if (v < edges.front() || v > edges.back()) continue;
        // half-open bins [e_i, e_{i+1}), last bin closed
        auto it = std::upper_bound(edges.begin(), edges.end(), v);
        std::size_t idx = static_cast<std::size_t>(it - edges.begin());
        idx = (idx == 0) ? 0 : idx - 1;
        if (idx >= h.counts.size()) idx = h.counts.size() - 1;
        h.counts[idx] += 1.0;
    }
    h.errors.resize(h.counts.size());
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        h.errors[i] = std::max(1.0, std::sqrt(h.counts[i]));
    }
    h.validate();
    return h;
}

// Freedman-Diaconis bin width, with a square-root-rule fallback when the
// interquartile range degenerates.
inline std::vector<double> freedman_diaconis_edges(std::vector<double> values) {
    if (values.empty()) throw EmptyHistogram("freedman_diaconis_edges: no events");
    std::sort(values.begin(), values.end());
    const double lo = values.front(), hi = values.back();
    if (!(std::isfinite(lo) && std::isfinite(hi))) {
        throw InvalidInput("freedman_diaconis_edges: non-finite values");
    }
    if (hi == lo) return {lo - 0.5, lo + 0.5};
    const std::size_t n = values.size();
    const double q1 = values[n / 4];
    const double q3 = values[(3 * n) / 4];
    double width = 2.0 * (q3 - q1) / std::cbrt(static_cast<double>(n));
    if (!(width > 0.0)) {
        width = (hi - lo) / std::ceil(std::sqrt(static_cast<double>(n)));
    }
    int nbins = static_cast<int>(std::ceil((hi - lo) / width));
    nbins = std::clamp(nbins, 1, 4000);
    std::vector<double> edges(static_cast<std::size_t>(nbins) + 1);
    for (int i = 0; i <= nbins; ++i) {
        edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / static_cast<double>(nbins);
    }
    return edges;
}

inline Histogram make_histogram(const std::vector<double>& values) {
    return make_histogram(values, freedman_diaconis_edges(values));
}

// Moment-based starting point.  With x = e_gamma*n + shift + gauss(sigma):
//   mean = mu*e_gamma + shift
//   var - sigma^2 = mu*e_gamma^2
//   k3 (third central moment) = mu*e_gamma^3
// so e_gamma = k3/(var - sigma^2) and mu = (var - sigma^2)^3 / k3^2.
inline SpectrumModel estimate_initial_spectrum(const std::vector<double>& values,
                                               double sigma_fixed) {
    if (values.empty()) throw EmptyHistogram("estimate_initial_spectrum: no events");
    if (!(sigma_fixed > 0.0)) {
        throw InvalidInput("estimate_initial_spectrum: sigma must be positive");
    }
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (const double v : values) mean += v;
    mean /= n;
    double var = 0.0, k3 = 0.0;
    for (const double v : values) {
        const double d = v - mean;
        var += d * d;
        k3 += d * d * d;
    }
    var /= n;
    k3 /= n;

    SpectrumModel m;
    m.sigma = sigma_fixed;
    const double excess = var - sigma_fixed * sigma_fixed;
    if (excess > 0.0 && k3 > 0.0) {
        m.e_gamma = k3 / excess;
        m.mu = excess * excess * excess / (k3 * k3);
    } else {
        // skew washed out (or negative by fluctuation): pick a scale that at
        // least spans the data and let the optimizer move from there
        m.e_gamma = std::max(sigma_fixed, std::sqrt(std::max(excess, 0.0)));
        m.mu = 1.0;
    }
    m.mu = std::clamp(m.mu, 1e-3, 600.0);
    m.e_gamma = std::clamp(m.e_gamma, 1e-12, 1e12);
    m.shift = std::clamp(mean - m.mu * m.e_gamma, 0.0, 1.0);
    m.amplitude = std::max(n, 1e-4);
    m.n_max = SpectrumModel::default_n_max(m.mu);
    return m;
}

// Starting point when the per-photon conversion is known (calibrated from
// the photon energy): the variance then pins mu directly,
//   mu = (var - sigma^2) / e_gamma^2,   shift = mean - mu*e_gamma.
inline SpectrumModel estimate_initial_spectrum(const std::vector<double>& values,
                                               double sigma_fixed, double e_gamma_known) {
    if (values.empty()) throw EmptyHistogram("estimate_initial_spectrum: no events");
    if (!(sigma_fixed > 0.0) || !(e_gamma_known > 0.0)) {
        throw InvalidInput("estimate_initial_spectrum: sigma and e_gamma must be positive");
    }
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (const double v : values) mean += v;
    mean /= n;
    double var = 0.0;
    for (const double v : values) var += (v - mean) * (v - mean);
    var /= n;

    SpectrumModel m;
    m.sigma = sigma_fixed;
    m.e_gamma = e_gamma_known;
    const double excess = var - sigma_fixed * sigma_fixed;
    m.mu = std::clamp(excess / (e_gamma_known * e_gamma_known), 1e-3, 600.0);
    m.shift = std::clamp(mean - m.mu * e_gamma_known, 0.0, 1.0);
    m.amplitude = std::max(n, 1e-4);
    m.n_max = SpectrumModel::default_n_max(m.mu);
    return m;
}

struct SpectrumFit {
    SpectrumModel model;
    double mu_err = 0.0;
    double amplitude_err = 0.0;
    double shift_err = 0.0;
    double e_gamma_err = 0.0;
    double chi2_dof = 0.0;
    double cost = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct PhotonCount {
    double mu = 0.0;
    double err = 0.0;
};

// Which shape parameters are held at their init values instead of floated.
// sigma is always held (it is a measured detector property).  Holding
// e_gamma matters in the unresolved regime (sigma comparable to e_gamma):
// there the data only constrain the products mu*e_gamma^k through the low
// moments, so mu and e_gamma trade off almost freely and mu alone is poorly
// determined.  The per-photon conversion is knowable independently (photon
// energy times the amplitude calibration), and pinning it restores a sharp
// mu estimate.
struct SpectrumConstraints {
    bool fix_e_gamma = false;
    bool fix_shift = false;
};

// Least squares over bins of (counts - expected)/error with sigma held fixed
// at its measured value.  Free parameters: mu (positive), amplitude
// (> 1e-5), and unless constrained shift (boxed to [0, 1]) and e_gamma.
inline SpectrumFit fit_spectrum(const Histogram& hist, const SpectrumModel& init,
                                const SpectrumConstraints& cons = {},
                                const LevMarOptions& opt = {}) {
    hist.validate();
    init.validate();
    if (!(hist.total() > 0.0)) {
        throw EmptyHistogram("fit_spectrum: histogram has no events");
    }
    const std::size_t nb = hist.counts.size();
    if (nb < 5) throw InvalidInput("fit_spectrum: need at least 5 bins");

    const int n_max = std::max(init.n_max, SpectrumModel::default_n_max(init.mu));
    const double sigma = init.sigma;
    const double shift_held = init.shift;
    const double e_gamma_held = init.e_gamma;

    std::vector<ParamMap> maps = {ParamMap::log_positive(), ParamMap::lower_bound(1e-5)};
    int i_shift = -1, i_eg = -1;
    if (!cons.fix_shift) {
        i_shift = static_cast<int>(maps.size());
        maps.push_back(ParamMap::box(0.0, 1.0));
    }
    if (!cons.fix_e_gamma) {
        i_eg = static_cast<int>(maps.size());
        maps.push_back(ParamMap::identity());
    }

    Eigen::VectorXd p0(static_cast<Eigen::Index>(maps.size()));
    p0[0] = maps[0].to_internal(init.mu);
    p0[1] = maps[1].to_internal(init.amplitude);
    if (i_shift >= 0) {
        p0[i_shift] = maps[static_cast<std::size_t>(i_shift)].to_internal(
            std::clamp(init.shift, 1e-9, 1.0 - 1e-9));
    }
    if (i_eg >= 0) p0[i_eg] = init.e_gamma;

    auto unpack = [&](const Eigen::VectorXd& p) {
        SpectrumModel m;
        m.mu = maps[0].to_physical(p[0]);
        m.amplitude = maps[1].to_physical(p[1]);
        m.shift = i_shift >= 0 ? maps[static_cast<std::size_t>(i_shift)].to_physical(p[i_shift])
                               : shift_held;
        m.e_gamma = i_eg >= 0 ? p[i_eg] : e_gamma_held;
        m.sigma = sigma;
        m.n_max = n_max;
        return m;
    };

    auto residuals = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        const SpectrumModel m = unpack(p);
        r.resize(static_cast<Eigen::Index>(nb));
        for (std::size_t i = 0; i < nb; ++i) {
            const double want = m.amplitude *
                                detail::poisson_weighted_sum(m.mu, m.n_max, [&](int n) {
                                    const double c = n * m.e_gamma + m.shift;
                                    return detail::normal_cdf(hist.bin_edges[i + 1], c, m.sigma) -
                                           detail::normal_cdf(hist.bin_edges[i], c, m.sigma);
                                });
            r[static_cast<Eigen::Index>(i)] = (want - hist.counts[i]) / hist.errors[i];
        }
    };

    const LevMarResult lm = levenberg_marquardt(residuals, p0, opt);
    if (!lm.converged) throw NonConvergence("fit_spectrum: optimizer did not converge");

    // A near-zero occupancy legitimately removes the quantum-spacing direction
    // from the Jacobian, so fall back to a pseudo-inverse when plain inversion
    // is unavailable rather than refusing to report the fit.
    Eigen::MatrixXd cov_int = lm.covariance;
    if (!lm.covariance_ok) {
        int rank = 0;
        cov_int = detail::pinv_covariance(lm.jacobian, lm.cost, rank);
    }
    const Eigen::MatrixXd cov = map_covariance(cov_int, lm.params, maps);

    SpectrumFit out;
    out.model = unpack(lm.params);
    out.mu_err = std::sqrt(std::max(0.0, cov(0, 0)));
    out.amplitude_err = std::sqrt(std::max(0.0, cov(1, 1)));
    out.shift_err = i_shift >= 0 ? std::sqrt(std::max(0.0, cov(i_shift, i_shift))) : 0.0;
    out.e_gamma_err = i_eg >= 0 ? std::sqrt(std::max(0.0, cov(i_eg, i_eg))) : 0.0;
    out.chi2_dof = lm.chi2_dof;
    out.cost = lm.cost;
    out.iterations = lm.iterations;
    out.converged = lm.converged;
    return out;
}

inline PhotonCount photon_count_estimate(const SpectrumFit& fit) {
    return {fit.model.mu, fit.mu_err};
}

// Local maxima whose prominence (height above the deepest saddle toward the
// nearest strictly higher bin) exceeds three Poisson errors.  A run of equal
// counts is one plateau and can host at most one maximum; integer counts tie
// often, so strict single-bin maxima would miss genuine peaks.  Boundary
// plateaus never count: a maximum needs a lower bin on each side.
inline int count_resolved_peaks(const Histogram& hist) {
    hist.validate();
    const std::vector<double>& c = hist.counts;
    const int n = static_cast<int>(c.size());
    int peaks = 0;
    for (int i = 0; i < n;) {
        int j = i;
        while (j + 1 < n && c[j + 1] == c[i]) ++j;
        const bool rises_left = i > 0 && c[i - 1] < c[i];
        const bool falls_right = j + 1 < n && c[j + 1] < c[i];
        if (rises_left && falls_right) {
            double lmin = c[i], rmin = c[i];
            for (int k = i - 1; k >= 0 && c[k] <= c[i]; --k) lmin = std::min(lmin, c[k]);
            for (int k = j + 1; k < n && c[k] <= c[i]; ++k) rmin = std::min(rmin, c[k]);
            const double prominence = c[i] - std::max(lmin, rmin);
            if (prominence > 3.0 * hist.errors[static_cast<std::size_t>(i)]) ++peaks;
        }
        i = j + 1;
    }
    return peaks;
}

}  // namespace mkid
