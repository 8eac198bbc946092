#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

#include "mkid/errors.hpp"

// Damped least squares (Levenberg-Marquardt) on numerically differentiated
// residuals.  Shared by every fitter in the library.
//
// Contract highlights, relied on by the fit modules and their tests:
//  - accepted cost sequence is monotone non-increasing,
//  - forward-difference Jacobian with step fd_step * max(|p_j|, 1),
//  - convergence when the relative cost decrease or the relative step falls
//    below tolerance; `converged` is false if the iteration cap is hit first,
//  - covariance = (J^T J)^{-1} * cost / (m - n) at the final parameters.

namespace mkid {

struct LevMarOptions {
    int max_iterations = 200;
    double cost_tol = 1e-10;
    double step_tol = 1e-10;
    double fd_step = 1e-7;
    double lambda_init = 1e-3;
    double lambda_up = 10.0;
    double lambda_down = 10.0;
    double lambda_max = 1e14;
};

struct LevMarResult {
    Eigen::VectorXd params;
    Eigen::MatrixXd covariance;        // valid only if covariance_ok
    Eigen::MatrixXd jacobian;          // at the returned parameters
    double cost = 0.0;                 // sum of squared residuals
    double chi2_dof = 0.0;             // cost / (m - n)
    int iterations = 0;                // accepted steps
    bool converged = false;
    bool covariance_ok = false;
    std::vector<double> cost_history;  // cost after each accepted step
};

// Fills the residual vector for a parameter vector; must be deterministic.
using ResidualFn = std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>;

namespace detail {

// Covariance from the final Jacobian via eigenvalue pseudo-inverse; exact flat
// directions (relative eigenvalue below 1e-10) contribute nothing.
inline Eigen::MatrixXd pinv_covariance(const Eigen::MatrixXd& jac, double cost, int& rank_out) {
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jtj);
    if (es.info() != Eigen::Success) {
        throw IllConditioned("pinv_covariance: eigendecomposition failed");
    }
    const Eigen::VectorXd& ev = es.eigenvalues();
    const Eigen::Index n = jtj.rows();
    const double cut = std::max(ev.maxCoeff(), 0.0) * 1e-10;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(n);
    int rank = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ev[i] > cut && ev[i] > 0.0) {
            inv[i] = 1.0 / ev[i];
            ++rank;
        }
    }
    rank_out = rank;
    const double dof = std::max(1.0, static_cast<double>(jac.rows()) - rank);
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose() * (cost / dof);
}

inline void forward_jacobian(const ResidualFn& fn, const Eigen::VectorXd& p,
                             const Eigen::VectorXd& r0, double fd_step,
                             Eigen::MatrixXd& jac) {
    Eigen::VectorXd ph = p;
    Eigen::VectorXd rh(r0.size());
    jac.resize(r0.size(), p.size());
    for (Eigen::Index j = 0; j < p.size(); ++j) {
        const double h = fd_step * std::max(std::abs(p[j]), 1.0);
        ph[j] = p[j] + h;
        fn(ph, rh);
        jac.col(j) = (rh - r0) / h;
        ph[j] = p[j];
    }
}

}  // namespace detail

inline LevMarResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd p,
                                        const LevMarOptions& opt = {}) {
    if (p.size() == 0 || !p.allFinite()) {
        throw InvalidInput("levenberg_marquardt: bad initial parameter vector");
    }
    Eigen::VectorXd r;
    fn(p, r);
    const Eigen::Index m = r.size();
    const Eigen::Index n = p.size();
    if (m < n) {
        throw InvalidInput("levenberg_marquardt: fewer residuals than parameters");
    }
    double cost = r.squaredNorm();
    if (!std::isfinite(cost)) {
        throw InvalidInput("levenberg_marquardt: residuals not finite at start");
    }

    LevMarResult out;
    out.cost_history.push_back(cost);

    Eigen::MatrixXd jac;
    detail::forward_jacobian(fn, p, r, opt.fd_step, jac);

    double lambda = opt.lambda_init;
    Eigen::VectorXd r_try(m);
    while (out.iterations < opt.max_iterations && !out.converged) {
        const Eigen::MatrixXd jtj = jac.transpose() * jac;
        const Eigen::VectorXd grad = jac.transpose() * r;

        // Marquardt scaling with a floor so dead columns stay solvable.
        Eigen::VectorXd damp = jtj.diagonal();
        const double dmax = damp.maxCoeff();
        for (Eigen::Index i = 0; i < n; ++i) {
            damp[i] = std::max(damp[i], std::max(1e-12 * dmax, 1e-300));
        }

        bool stalled = false;
        for (;;) {
            Eigen::MatrixXd a = jtj;
            a.diagonal() += lambda * damp;
            const Eigen::VectorXd step = a.ldlt().solve(-grad);
            bool ok = step.allFinite();
            double cost_try = 0.0;
            Eigen::VectorXd p_try;
            if (ok) {
                p_try = p + step;
                fn(p_try, r_try);
                cost_try = r_try.squaredNorm();
                ok = std::isfinite(cost_try) && cost_try < cost;
            }
            if (ok) {
                const double rel_cost = (cost - cost_try) / std::max(cost, 1e-300);
                const double rel_step = step.norm() / (p.norm() + 1e-300);
                p = p_try;
                r = r_try;
                cost = cost_try;
                ++out.iterations;
                out.cost_history.push_back(cost);
                lambda = std::max(lambda / opt.lambda_down, 1e-15);
                if (rel_cost < opt.cost_tol || rel_step < opt.step_tol) {
                    out.converged = true;
                } else {
                    detail::forward_jacobian(fn, p, r, opt.fd_step, jac);
                }
                break;
            }
            lambda *= opt.lambda_up;
            if (lambda > opt.lambda_max) {
                stalled = true;
                break;
            }
        }
        if (stalled) {
            // No direction reduces the cost any further: numerical minimum.
            out.converged = true;
        }
    }

    detail::forward_jacobian(fn, p, r, opt.fd_step, jac);
    out.params = std::move(p);
    out.jacobian = jac;
    out.cost = cost;
    out.chi2_dof = (m > n) ? cost / static_cast<double>(m - n) : 0.0;

    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const auto ldlt = jtj.ldlt();
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
        const double s2 = (m > n) ? cost / static_cast<double>(m - n) : 0.0;
        out.covariance = ldlt.solve(Eigen::MatrixXd::Identity(n, n)) * s2;
        out.covariance_ok = out.covariance.allFinite();
    }
    return out;
}

// Smooth reparameterizations used to impose bounds inside the optimizer.
// The optimizer always works on the unconstrained internal coordinate.
struct ParamMap {
    enum class Kind { identity, log_positive, lower_bound, box };

    Kind kind = Kind::identity;
    double lo = 0.0;
    double hi = 0.0;

    static ParamMap identity() { return {}; }
    static ParamMap log_positive() { return {Kind::log_positive, 0.0, 0.0}; }
    static ParamMap lower_bound(double lo) { return {Kind::lower_bound, lo, 0.0}; }
    static ParamMap box(double lo, double hi) { return {Kind::box, lo, hi}; }

    double to_internal(double x) const {
        switch (kind) {
            case Kind::identity: return x;
            case Kind::log_positive:
                if (!(x > 0.0)) throw InvalidInput("ParamMap: value must be > 0");
                return std::log(x);
            case Kind::lower_bound:
                if (!(x > lo)) throw InvalidInput("ParamMap: value must exceed lower bound");
                return std::log(x - lo);
            case Kind::box:
                if (!(x > lo && x < hi)) throw InvalidInput("ParamMap: value outside box");
                return std::log((x - lo) / (hi - x));
        }
        return x;
    }

    double to_physical(double u) const {
        switch (kind) {
            case Kind::identity: return u;
            case Kind::log_positive: return std::exp(u);
            case Kind::lower_bound: return lo + std::exp(u);
            case Kind::box: {
                const double s = 1.0 / (1.0 + std::exp(-u));
                return lo + (hi - lo) * s;
            }
        }
        return u;
    }

    // d(physical)/d(internal), for first-order uncertainty propagation.
    double dphys(double u) const {
        switch (kind) {
            case Kind::identity: return 1.0;
            case Kind::log_positive: return std::exp(u);
            case Kind::lower_bound: return std::exp(u);
            case Kind::box: {
                const double s = 1.0 / (1.0 + std::exp(-u));
                return (hi - lo) * s * (1.0 - s);
            }
        }
        return 1.0;
    }
};

// Covariance of mapped (physical) parameters from the internal covariance.
inline Eigen::MatrixXd map_covariance(const Eigen::MatrixXd& cov_internal,
                                      const Eigen::VectorXd& internal,
                                      const std::vector<ParamMap>& maps) {
    Eigen::MatrixXd cov = cov_internal;
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
        for (Eigen::Index j = 0; j < cov.cols(); ++j) {
            cov(i, j) *= maps[static_cast<std::size_t>(i)].dphys(internal[i]) *
                         maps[static_cast<std::size_t>(j)].dphys(internal[j]);
        }
    }
    return cov;
}

}  // namespace mkid
