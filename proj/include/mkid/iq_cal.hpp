#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <optional>
#include <vector>

#include "mkid/errors.hpp"
#include "mkid/poly.hpp"
#include "mkid/resonance.hpp"

// IQ-plane correction chain, applied in this fixed order:
//   1. cable delay subtraction (tabulated complex profile vs frequency)
//   2. mixer ellipse -> unit circle (inverse affine of the fitted ellipse)
//   3. background removal  S21 -> S21 e^{-j phi(f)} / A(f)
//   4. rotation about the circle center aligning the locus gap with +I
//   5. asymmetry correction  S21 -> 1 - cos(theta) e^{j theta} (1 - S21)
//
// Ellipse convention: the locus is I = I0 + A_I cos t, Q = Q0 + A_Q cos(t - gamma)
// with gamma in (0, pi).  A point set cannot distinguish traversal direction,
// so gamma's sign is fixed positive; a dataset generated with cos(t + g) is
// recovered as gamma = +g.
//
// The asymmetry step undoes a resonance phase phi0 when theta = -phi0 (the
// coefficient cos(theta) e^{j theta} e^{j phi0} must come out real).
// Steps 4 and 5 are conformal-affine maps: they never bend a circle, so the
// circularity of the corrected locus is decided by the ellipse and
// background fits alone.
//
// fit_calibration determines the ellipse and background jointly, by
// alternating (a) a resonance fit with a complex polynomial background on the
// ellipse-corrected scan and (b) a linear refit of the ellipse against the
// modeled locus.  A masked wing-only background fit cannot work here: the
// resonance's Lorentzian tails (~(Q/Qc)/(2 dx/linewidth) in phase) pollute
// any out-of-band polynomial at the percent level, and in-band background
// variation biases a standalone conic ellipse fit by a similar amount.  The
// joint model separates both exactly.  asymmetry theta defaults to minus the
// joint fit's phi0, which symmetrizes the circle; the center rotation then
// mops up the residual gap misalignment (near zero by construction).

namespace mkid {

struct IqPoint {
    double i = 0.0;
    double q = 0.0;
};

struct IqTrace {
    std::vector<double> axis;  // Hz for sweeps, seconds for time records
    std::vector<double> i;
    std::vector<double> q;

    void validate() const {
        if (axis.size() != i.size() || i.size() != q.size()) {
            throw InvalidInput("IqTrace: array size mismatch");
        }
        if (axis.empty()) throw InvalidInput("IqTrace: empty trace");
        for (std::size_t k = 0; k < axis.size(); ++k) {
            if (!std::isfinite(axis[k]) || !std::isfinite(i[k]) || !std::isfinite(q[k])) {
                throw InvalidInput("IqTrace: non-finite entry");
            }
            if (k > 0 && !(axis[k] > axis[k - 1])) {
                throw InvalidInput("IqTrace: axis must increase strictly");
            }
        }
    }
};

inline IqTrace to_trace(const ComplexSweep& sweep) {
    IqTrace t;
    t.axis = sweep.freq_hz;
    t.i.resize(sweep.s21.size());
    t.q.resize(sweep.s21.size());
    for (std::size_t k = 0; k < sweep.s21.size(); ++k) {
        t.i[k] = sweep.s21[k].real();
        t.q[k] = sweep.s21[k].imag();
    }
    return t;
}

inline ComplexSweep to_sweep(const IqTrace& trace) {
    ComplexSweep s;
    s.freq_hz = trace.axis;
    s.s21.resize(trace.i.size());
    for (std::size_t k = 0; k < trace.i.size(); ++k) {
        s.s21[k] = {trace.i[k], trace.q[k]};
    }
    return s;
}

// ---------------------------------------------------------------------------
// Step 1: cable delay

struct DelayProfile {
    std::vector<double> freq_hz;
    std::vector<std::complex<double>> value;

    bool empty() const { return freq_hz.empty(); }

    void validate() const {
        if (freq_hz.size() != value.size() || freq_hz.size() < 2) {
            throw InvalidInput("DelayProfile: need at least 2 tabulated points");
        }
        for (std::size_t k = 0; k < freq_hz.size(); ++k) {
            if (!std::isfinite(freq_hz[k]) || !std::isfinite(value[k].real()) ||
                !std::isfinite(value[k].imag())) {
                throw InvalidInput("DelayProfile: non-finite entry");
            }
            if (k > 0 && !(freq_hz[k] > freq_hz[k - 1])) {
                throw InvalidInput("DelayProfile: frequencies must increase strictly");
            }
        }
    }

    std::complex<double> at(double f_hz) const {
        validate();
        if (f_hz < freq_hz.front() || f_hz > freq_hz.back()) {
            throw FrequencyOutOfRange("DelayProfile: frequency outside tabulated range");
        }
        const auto it = std::upper_bound(freq_hz.begin(), freq_hz.end(), f_hz);
        const std::size_t hi = std::min<std::size_t>(
            static_cast<std::size_t>(it - freq_hz.begin()), freq_hz.size() - 1);
        const std::size_t lo = hi == 0 ? 0 : hi - 1;
        if (lo == hi) return value[lo];
        const double t = (f_hz - freq_hz[lo]) / (freq_hz[hi] - freq_hz[lo]);
        return value[lo] + t * (value[hi] - value[lo]);
    }
};

inline ComplexSweep correct_cable_delay(const ComplexSweep& sweep, const DelayProfile& profile) {
    sweep.validate();
    profile.validate();
    ComplexSweep out = sweep;
    for (std::size_t k = 0; k < out.s21.size(); ++k) {
        out.s21[k] -= profile.at(out.freq_hz[k]);
    }
    return out;
}

inline IqTrace correct_cable_delay(const IqTrace& trace, const DelayProfile& profile) {
    trace.validate();
    profile.validate();
    IqTrace out = trace;
    for (std::size_t k = 0; k < out.axis.size(); ++k) {
        const std::complex<double> d = profile.at(out.axis[k]);
        out.i[k] -= d.real();
        out.q[k] -= d.imag();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Step 2: mixer ellipse

struct EllipseParams {
    double i0 = 0.0;
    double q0 = 0.0;
    double a_i = 1.0;
    double a_q = 1.0;
    double gamma = 0.5 * pi;  // quadrature skew; pi/2 means no skew

    void validate() const {
        if (!(a_i > 0.0) || !(a_q > 0.0)) {
            throw InvalidInput("EllipseParams: semi-axes must be positive");
        }
        if (!(std::abs(gamma - 0.5 * pi) < 0.5 * pi)) {
            throw InvalidInput("EllipseParams: gamma must lie in (0, pi)");
        }
    }

    IqPoint at(double t) const {
        return {i0 + a_i * std::cos(t), q0 + a_q * std::cos(t - gamma)};
    }
};

struct EllipseFit {
    EllipseParams params;
    double rms_residual = 0.0;  // algebraic conic residual, normalized coords
};

inline EllipseFit fit_ellipse(const std::vector<IqPoint>& points) {
    if (points.size() < 6) {
        throw InvalidInput("fit_ellipse: need at least 6 points");
    }
    const std::size_t n = points.size();
    double cx = 0.0, cy = 0.0;
    for (const auto& p : points) {
        if (!std::isfinite(p.i) || !std::isfinite(p.q)) {
            throw InvalidInput("fit_ellipse: non-finite point");
        }
        cx += p.i;
        cy += p.q;
    }
    cx /= static_cast<double>(n);
    cy /= static_cast<double>(n);
    double s2 = 0.0;
    for (const auto& p : points) {
        s2 += (p.i - cx) * (p.i - cx) + (p.q - cy) * (p.q - cy);
    }
    const double s = std::sqrt(s2 / static_cast<double>(n));
    if (!(s > 0.0)) throw DegenerateConic("fit_ellipse: all points coincide");

    // Total least squares on the general conic in normalized coordinates.
    Eigen::MatrixXd d(static_cast<Eigen::Index>(n), 6);
    for (std::size_t k = 0; k < n; ++k) {
        const double u = (points[k].i - cx) / s;
        const double v = (points[k].q - cy) / s;
        d.row(static_cast<Eigen::Index>(k)) << u * u, u * v, v * v, u, v, 1.0;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(d, Eigen::ComputeThinU | Eigen::ComputeFullV);
    Eigen::VectorXd th = svd.matrixV().col(5);
    if (th[0] + th[2] < 0.0) th = -th;  // fix overall sign so a + c > 0
    const double a = th[0], b = th[1], c = th[2], dd = th[3], e = th[4], f = th[5];

    const double disc = b * b - 4.0 * a * c;
    if (!(disc < -1e-12 * (a * a + b * b + c * c))) {
        throw DegenerateConic("fit_ellipse: best conic is not an ellipse");
    }
    // Center from the gradient zero of the quadratic form.
    const double u0 = (b * e - 2.0 * c * dd) / (-disc);
    const double v0 = (b * dd - 2.0 * a * e) / (-disc);
    const double g = -(a * u0 * u0 + b * u0 * v0 + c * v0 * v0 + dd * u0 + e * v0 + f);
    if (!(g > 0.0)) throw DegenerateConic("fit_ellipse: degenerate (point or imaginary) conic");

    // Match a u'^2 + b u'v' + c v'^2 = g against the parametric form
    //   (x/a_i)^2 - 2 (x/a_i)(y/a_q) cos(gamma) + (y/a_q)^2 = sin^2(gamma).
    const double cosg = -b / (2.0 * std::sqrt(a * c));
    const double gamma = std::acos(std::clamp(cosg, -1.0, 1.0));
    const double k = g / (1.0 - cosg * cosg);

    EllipseFit out;
    out.params.i0 = cx + u0 * s;
    out.params.q0 = cy + v0 * s;
    out.params.a_i = std::sqrt(k / a) * s;
    out.params.a_q = std::sqrt(k / c) * s;
    out.params.gamma = gamma;
    out.params.validate();
    out.rms_residual = (d * th).norm() / std::sqrt(static_cast<double>(n));
    return out;
}

// Inverse affine of the fitted ellipse: points on the ellipse land on the
// unit circle, traversed as (cos t, sin t).
inline IqPoint ellipse_to_circle(const IqPoint& p, const EllipseParams& e) {
    e.validate();
    const double x = (p.i - e.i0) / e.a_i;
    const double y = ((p.q - e.q0) / e.a_q - x * std::cos(e.gamma)) / std::sin(e.gamma);
    return {x, y};
}

// ---------------------------------------------------------------------------
// Step 3: background

namespace detail {

inline void unwrap_inplace(std::vector<double>& phase) {
    for (std::size_t k = 1; k < phase.size(); ++k) {
        double d = phase[k] - phase[k - 1];
        while (d > pi) {
            phase[k] -= 2.0 * pi;
            d = phase[k] - phase[k - 1];
        }
        while (d < -pi) {
            phase[k] += 2.0 * pi;
            d = phase[k] - phase[k - 1];
        }
    }
}

inline ScaledPoly<double> fit_poly(const std::vector<double>& x, const std::vector<double>& y,
                                   double center, double scale, int degree) {
    const Eigen::Index m = static_cast<Eigen::Index>(x.size());
    const Eigen::Index nc = degree + 1;
    Eigen::MatrixXd a(m, nc);
    Eigen::VectorXd b(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        const double u = (x[static_cast<std::size_t>(r)] - center) / scale;
        double pw = 1.0;
        for (Eigen::Index c = 0; c < nc; ++c) {
            a(r, c) = pw;
            pw *= u;
        }
        b[r] = y[static_cast<std::size_t>(r)];
    }
    const Eigen::VectorXd coef = (a.transpose() * a).ldlt().solve(a.transpose() * b);
    ScaledPoly<double> p;
    p.center = center;
    p.scale = scale;
    p.coeffs.assign(coef.data(), coef.data() + nc);
    return p;
}

}  // namespace detail

struct BackgroundFit {
    ScaledPoly<double> amplitude = ScaledPoly<double>::constant(1.0);
    ScaledPoly<double> phase = ScaledPoly<double>::constant(0.0);
};

// Polynomials in frequency for |S21| and unwrapped arg S21, fitted outside
// the resonance band.  The phase is unwrapped over the full scan so the two
// wings share a branch.
inline BackgroundFit fit_background(const ComplexSweep& scan, double band_lo_hz,
                                    double band_hi_hz, int degree = 2) {
    scan.validate();
    if (!(band_lo_hz < band_hi_hz)) {
        throw InvalidInput("fit_background: empty exclusion band");
    }
    if (degree < 0 || degree > 8) {
        throw InvalidInput("fit_background: unsupported polynomial degree");
    }
    const std::size_t n = scan.freq_hz.size();
    std::vector<double> arg(n);
    for (std::size_t k = 0; k < n; ++k) arg[k] = std::arg(scan.s21[k]);
    detail::unwrap_inplace(arg);

    std::vector<double> fx, fy_amp, fy_arg;
    std::size_t n_left = 0, n_right = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double f = scan.freq_hz[k];
        if (f >= band_lo_hz && f <= band_hi_hz) continue;
        (f < band_lo_hz ? n_left : n_right) += 1;
        fx.push_back(f);
        fy_amp.push_back(std::abs(scan.s21[k]));
        fy_arg.push_back(arg[k]);
    }
    if (fx.size() < 10 || n_left == 0 || n_right == 0 ||
        fx.size() < static_cast<std::size_t>(degree) + 1) {
        throw InsufficientBackground("fit_background: too few points outside the band");
    }
    const double center = 0.5 * (scan.freq_hz.front() + scan.freq_hz.back());
    const double scale = std::max(0.5 * (scan.freq_hz.back() - scan.freq_hz.front()), 1.0);

    BackgroundFit out;
    out.amplitude = detail::fit_poly(fx, fy_amp, center, scale, degree);
    out.phase = detail::fit_poly(fx, fy_arg, center, scale, degree);
    return out;
}

inline std::complex<double> apply_background(std::complex<double> s21, double f_hz,
                                             const ScaledPoly<double>& amplitude,
                                             const ScaledPoly<double>& phase) {
    const double a = amplitude.eval(f_hz);
    if (!(a > 0.0)) {
        throw InvalidInput("apply_background: amplitude polynomial must be positive");
    }
    return s21 * std::polar(1.0 / a, -phase.eval(f_hz));
}

// ---------------------------------------------------------------------------
// Step 4: circle fit and center rotation

struct Circle {
    double ci = 0.0;
    double cq = 0.0;
    double radius = 1.0;
};

struct CircleFit {
    Circle circle;
    double rms = 0.0;  // RMS radial distance of the points from the circle
};

// Algebraic circle fit minimizing sum (r_k^2 - R^2)^2, linear in
// (2 ci, 2 cq, R^2 - ci^2 - cq^2).
inline CircleFit fit_circle(const std::vector<IqPoint>& points) {
    if (points.size() < 3) throw CircleFitFailed("fit_circle: need at least 3 points");
    Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
    Eigen::Vector3d atb = Eigen::Vector3d::Zero();
    for (const auto& p : points) {
        const Eigen::Vector3d row(p.i, p.q, 1.0);
        const double rhs = p.i * p.i + p.q * p.q;
        ata += row * row.transpose();
        atb += row * rhs;
    }
    const Eigen::Vector3d sol = ata.ldlt().solve(atb);
    if (!sol.allFinite()) throw CircleFitFailed("fit_circle: singular normal equations");
    CircleFit out;
    out.circle.ci = 0.5 * sol[0];
    out.circle.cq = 0.5 * sol[1];
    const double r2 = sol[2] + out.circle.ci * out.circle.ci + out.circle.cq * out.circle.cq;
    if (!(r2 > 0.0)) throw CircleFitFailed("fit_circle: nonpositive squared radius");
    out.circle.radius = std::sqrt(r2);
    double acc = 0.0;
    for (const auto& p : points) {
        const double d = std::hypot(p.i - out.circle.ci, p.q - out.circle.cq) - out.circle.radius;
        acc += d * d;
    }
    out.rms = std::sqrt(acc / static_cast<double>(points.size()));
    return out;
}

struct CenterRotation {
    double angle = 0.0;  // rotation applied, about the fitted center
    CircleFit fit;
};

namespace detail {

// Midpoint of the widest angular void between consecutive sorted point
// angles about the circle center; the locus gap of a swept resonance.
inline double gap_midpoint_angle(const std::vector<IqPoint>& points, const Circle& c) {
    std::vector<double> ang;
    ang.reserve(points.size());
    for (const auto& p : points) ang.push_back(std::atan2(p.q - c.cq, p.i - c.ci));
    std::sort(ang.begin(), ang.end());
    double best_gap = 2.0 * pi - (ang.back() - ang.front());
    double mid = ang.back() + 0.5 * best_gap;
    for (std::size_t k = 1; k < ang.size(); ++k) {
        const double gap = ang[k] - ang[k - 1];
        if (gap > best_gap) {
            best_gap = gap;
            mid = ang[k - 1] + 0.5 * gap;
        }
    }
    return std::remainder(mid, 2.0 * pi);
}

}  // namespace detail

// Rotates the locus about its fitted center so the gap midpoint lands on the
// +I direction; returns the rotated points and the angle applied.
inline CenterRotation center_rotation(std::vector<IqPoint>& points) {
    CenterRotation out;
    out.fit = fit_circle(points);
    if (out.fit.rms > 0.1 * out.fit.circle.radius) {
        throw CircleFitFailed("center_rotation: points do not lie on a circle");
    }
    out.angle = -detail::gap_midpoint_angle(points, out.fit.circle);
    const double co = std::cos(out.angle), si = std::sin(out.angle);
    for (auto& p : points) {
        const double x = p.i - out.fit.circle.ci;
        const double y = p.q - out.fit.circle.cq;
        p.i = out.fit.circle.ci + co * x - si * y;
        p.q = out.fit.circle.cq + si * x + co * y;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Step 5: asymmetry, and readout transforms

inline std::complex<double> asymmetry_rotation(std::complex<double> s21, double theta) {
    if (!(std::abs(theta) < 0.5 * pi)) {
        throw InvalidInput("asymmetry_rotation: requires |theta| < pi/2");
    }
    return 1.0 - std::cos(theta) * std::polar(1.0, theta) * (1.0 - s21);
}

inline std::complex<double> mobius_readout(std::complex<double> s21) {
    const std::complex<double> d = 1.0 - s21;
    if (std::abs(d) < 1e-12) {
        throw PoleAtUnity("mobius_readout: S21 too close to 1");
    }
    return 1.0 / d;
}

struct PhaseAmplitude {
    std::vector<double> phase;      // unwrapped, radians about the circle center
    std::vector<double> amplitude;  // distance from center over circle radius
};

inline PhaseAmplitude phase_amplitude(const IqTrace& trace, const Circle& circle) {
    trace.validate();
    if (!(circle.radius > 0.0)) throw InvalidInput("phase_amplitude: radius must be positive");
    PhaseAmplitude out;
    out.phase.resize(trace.axis.size());
    out.amplitude.resize(trace.axis.size());
    for (std::size_t k = 0; k < trace.axis.size(); ++k) {
        const double x = trace.i[k] - circle.ci;
        const double y = trace.q[k] - circle.cq;
        out.phase[k] = std::atan2(y, x);
        out.amplitude[k] = std::hypot(x, y) / circle.radius;
    }
    detail::unwrap_inplace(out.phase);
    return out;
}

// ---------------------------------------------------------------------------
// The assembled chain

struct CalibrationChain {
    DelayProfile delay;  // empty profile means no delay step
    EllipseParams ellipse;
    ScaledPoly<double> bg_amplitude = ScaledPoly<double>::constant(1.0);
    ScaledPoly<double> bg_phase = ScaledPoly<double>::constant(0.0);
    double center_rotation_rad = 0.0;
    Circle rotation_center;          // circle fitted before the rotation step
    double asymmetry_theta_rad = 0.0;
    Circle circle;  // final corrected calibration circle, for phase_amplitude
    double band_lo_hz = 0.0;
    double band_hi_hz = 0.0;
    double rms_over_radius = 0.0;       // systematic circularity, on the modeled locus
    double data_rms_over_radius = 0.0;  // same metric on the (noisy) data, diagnostics

    std::complex<double> apply_point(double f_hz, std::complex<double> z) const {
        if (!delay.empty()) z -= delay.at(f_hz);
        const IqPoint circ = ellipse_to_circle({z.real(), z.imag()}, ellipse);
        z = {circ.i, circ.q};
        z = apply_background(z, f_hz, bg_amplitude, bg_phase);
        const std::complex<double> c{rotation_center.ci, rotation_center.cq};
        z = c + std::polar(1.0, center_rotation_rad) * (z - c);
        return asymmetry_rotation(z, asymmetry_theta_rad);
    }

    ComplexSweep apply(const ComplexSweep& sweep) const {
        ComplexSweep out = sweep;
        for (std::size_t k = 0; k < out.s21.size(); ++k) {
            out.s21[k] = apply_point(out.freq_hz[k], out.s21[k]);
        }
        return out;
    }

    // Time-domain records are taken at a fixed readout frequency.
    IqTrace apply(const IqTrace& trace, double readout_f_hz) const {
        IqTrace out = trace;
        for (std::size_t k = 0; k < out.i.size(); ++k) {
            const std::complex<double> z = apply_point(readout_f_hz, {out.i[k], out.q[k]});
            out.i[k] = z.real();
            out.q[k] = z.imag();
        }
        return out;
    }
};


struct CalibrationConfig {
    double band_lo_hz = 0.0;  // resonance band around the dip
    double band_hi_hz = 0.0;
    int background_degree = 2;  // degree of the background truth being removed
    std::optional<double> asymmetry_theta;  // default: minus the fitted phi0
    LevMarOptions optimizer{};
};

namespace detail {

// Forward ellipse map (the inverse of ellipse_to_circle).
inline std::complex<double> onto_ellipse(std::complex<double> w, const EllipseParams& e) {
    const double x = w.real(), y = w.imag();
    return {e.i0 + e.a_i * x, e.q0 + e.a_q * (x * std::cos(e.gamma) + y * std::sin(e.gamma))};
}

inline std::complex<double> through_ellipse(std::complex<double> z, const EllipseParams& e) {
    const IqPoint p = ellipse_to_circle({z.real(), z.imag()}, e);
    return {p.i, p.q};
}

// One joint model evaluation for fit_calibration's separable least squares.
// Pre-ellipse model: P(u) + R / (1 + 2jq (f-f0)/f0) with a free complex
// polynomial P and a free complex residue R.  This is exactly the span of
// background * resonance loci for the given (f0, q): the polynomial part of
// dip/den folds into P and only the residue at the pole survives.  A separate
// ellipse offset would duplicate P's constant term through the ellipse map
// (rank deficiency), so the offset is fixed to zero and P absorbs it.
struct JointLinearFit {
    // [Re c0, Im c0, ..., Re cD, Im cD, Re R, Im R]
    Eigen::VectorXd coeffs;
    Eigen::VectorXd residuals;
};

inline JointLinearFit joint_linear_solve(const std::vector<double>& freq,
                                         const std::vector<std::complex<double>>& data,
                                         double fc, double fs, int degree, double f0, double q,
                                         double a_q, double gamma) {
    const auto n = static_cast<Eigen::Index>(freq.size());
    const Eigen::Index ncol = 2 * (degree + 1) + 2;
    Eigen::MatrixXd design(2 * n, ncol);
    Eigen::VectorXd rhs(2 * n);
    const double cg = std::cos(gamma), sg = std::sin(gamma);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double f = freq[static_cast<std::size_t>(k)];
        const double u = (f - fc) / fs;
        const std::complex<double> inv =
            1.0 / std::complex<double>(1.0, 2.0 * q * (f - f0) / f0);
        auto put = [&](Eigen::Index col, const std::complex<double>& w) {
            design(2 * k, col) = w.real();
            design(2 * k + 1, col) = a_q * (cg * w.real() + sg * w.imag());
        };
        double mono = 1.0;  // u^m, m = 0..degree
        for (int m = 0; m <= degree; ++m) {
            put(2 * m, {mono, 0.0});
            put(2 * m + 1, {0.0, mono});
            mono *= u;
        }
        put(ncol - 2, inv);
        put(ncol - 1, inv * std::complex<double>(0.0, 1.0));
        rhs(2 * k) = data[static_cast<std::size_t>(k)].real();
        rhs(2 * k + 1) = data[static_cast<std::size_t>(k)].imag();
    }
    JointLinearFit out;
    const Eigen::MatrixXd gram = design.transpose() * design;
    const Eigen::VectorXd moment = design.transpose() * rhs;
    out.coeffs = gram.ldlt().solve(moment);
    out.residuals = design * out.coeffs - rhs;
    return out;
}

}  // namespace detail

// Fits steps 2-5 from a delay-corrected view of the scan and packages the
// full chain.
//
// The ellipse and background are determined jointly: the scan is modeled as
// ellipse(p(f) * resonance(f)) and fitted by separable least squares with
// four nonlinear parameters (f0, q, a_q, gamma); for fixed values of those
// the pre-ellipse locus spans exactly P(u) + R/den(f), a complex polynomial
// plus a complex residue over the resonance denominator, which is solved as
// an exact linear subproblem.  A masked wing-only background fit cannot
// reach the required accuracy: the resonance's Lorentzian tails pollute any
// out-of-band polynomial at the percent level, and in-band background
// variation biases a standalone conic ellipse fit similarly.  a_i is pinned
// to 1 and the ellipse offset to 0: the data cannot distinguish an axis
// scale from the background's overall magnitude, nor an ellipse center from
// the background's constant term, so the recovered ellipse matches the true
// one up to a common scale on (a_i, a_q) and an offset, and the skew gamma
// is recovered absolutely.
//
// chain.rms_over_radius gates the noise-independent systematic circularity
// (chain applied to the fitted model of the scan); the residual on the noisy
// data itself is reported in data_rms_over_radius.
inline CalibrationChain fit_calibration(const ComplexSweep& scan, const DelayProfile& delay,
                                        const CalibrationConfig& cfg) {
    scan.validate();
    if (!(cfg.band_lo_hz < cfg.band_hi_hz)) {
        throw InvalidInput("fit_calibration: empty resonance band");
    }
    if (cfg.background_degree < 0) {
        throw InvalidInput("fit_calibration: negative background degree");
    }
    ComplexSweep work = delay.empty() ? scan : correct_cable_delay(scan, delay);
    const std::size_t n = work.freq_hz.size();

    std::vector<IqPoint> band;
    std::vector<std::size_t> band_idx;
    for (std::size_t k = 0; k < n; ++k) {
        if (work.freq_hz[k] >= cfg.band_lo_hz && work.freq_hz[k] <= cfg.band_hi_hz) {
            band.push_back({work.s21[k].real(), work.s21[k].imag()});
            band_idx.push_back(k);
        }
    }
    if (band.size() < 16 || n - band.size() < 16) {
        throw InvalidInput("fit_calibration: need >= 16 points inside and outside the band");
    }

    CalibrationChain chain;
    chain.delay = delay;
    chain.band_lo_hz = cfg.band_lo_hz;
    chain.band_hi_hz = cfg.band_hi_hz;

    const double fc = 0.5 * (work.freq_hz.front() + work.freq_hz.back());
    const double fs = 0.5 * (work.freq_hz.back() - work.freq_hz.front());
    const int degree = cfg.background_degree + 3;  // lets p track A(f) e^{j phi(f)}

    // Nonlinear starting point.  f0: where the locus moves fastest with
    // frequency (the resonance swing); q: from the convention that the band
    // spans ~10 linewidths; axis ratio and skew: from a conic ellipse fit of
    // the band arc when it succeeds, else a circle.
    double f0_init = 0.5 * (cfg.band_lo_hz + cfg.band_hi_hz);
    double speed_max = -1.0;
    for (std::size_t k = 0; k + 1 < band_idx.size(); ++k) {
        const double sp = std::abs(work.s21[band_idx[k + 1]] - work.s21[band_idx[k]]);
        if (sp > speed_max) {
            speed_max = sp;
            f0_init = 0.5 * (work.freq_hz[band_idx[k + 1]] + work.freq_hz[band_idx[k]]);
        }
    }
    const double q_init = f0_init / (0.1 * (cfg.band_hi_hz - cfg.band_lo_hz));
    // The conic bootstrap can fail on clean, strongly modulated arcs (the
    // band locus is not an exact conic); fall back to a seed grid then.
    std::vector<double> aq_seeds, gamma_seeds;
    try {
        const EllipseParams boot = fit_ellipse(band).params;
        aq_seeds = {boot.a_q / boot.a_i};
        gamma_seeds = {boot.gamma, 0.5 * pi};
    } catch (const Error&) {
        aq_seeds = {0.7, 1.0, 1.4};
        gamma_seeds = {0.6, 1.05, 0.5 * pi, 1.95, 2.4};
    }

    const std::vector<ParamMap> maps = {
        ParamMap::identity(),            // (f0 - fc) / fs
        ParamMap::log_positive(),        // q
        ParamMap::log_positive(),        // a_q / a_i
        ParamMap::box(1e-3, pi - 1e-3),  // gamma
    };
    Eigen::VectorXd start(4);
    start << (f0_init - fc) / fs, std::log(q_init), std::log(aq_seeds.front()),
        maps[3].to_internal(gamma_seeds.front());

    auto inner = [&](const Eigen::VectorXd& internal) {
        return detail::joint_linear_solve(work.freq_hz, work.s21, fc, fs, degree,
                                          fc + fs * internal(0), maps[1].to_physical(internal(1)),
                                          maps[2].to_physical(internal(2)),
                                          maps[3].to_physical(internal(3)));
    };

    // Rank the (a_q, gamma) seeds with cheap probes on a decimated scan, then
    // polish the few distinct best ones with the full optimizer and keep the
    // lowest final cost.
    std::vector<double> probe_f;
    std::vector<std::complex<double>> probe_z;
    const std::size_t stride = std::max<std::size_t>(1, n / 1500);
    for (std::size_t k = 0; k < n; k += stride) {
        probe_f.push_back(work.freq_hz[k]);
        probe_z.push_back(work.s21[k]);
    }
    struct Seed {
        double cost;
        Eigen::VectorXd params;
    };
    std::vector<Seed> probes;
    for (double aq : aq_seeds) {
        for (double g : gamma_seeds) {
            Eigen::VectorXd trial = start;
            trial(2) = std::log(aq);
            trial(3) = maps[3].to_internal(g);
            const double c = detail::joint_linear_solve(
                                 probe_f, probe_z, fc, fs, degree, fc + fs * trial(0),
                                 maps[1].to_physical(trial(1)), maps[2].to_physical(trial(2)),
                                 maps[3].to_physical(trial(3)))
                                 .residuals.squaredNorm();
            probes.push_back({c, trial});
        }
    }
    std::sort(probes.begin(), probes.end(),
              [](const Seed& a, const Seed& b) { return a.cost < b.cost; });
    std::vector<Eigen::VectorXd> starts;
    for (const Seed& s : probes) {
        if (starts.size() >= 2) break;
        bool distinct = true;
        for (const Eigen::VectorXd& kept : starts) {
            if (std::abs(maps[3].to_physical(s.params(3)) - maps[3].to_physical(kept(3))) < 0.4) {
                distinct = false;
                break;
            }
        }
        if (distinct) starts.push_back(s.params);
    }

    std::optional<LevMarResult> best;
    for (const Eigen::VectorXd& s : starts) {
        LevMarResult r;
        try {
            r = levenberg_marquardt(
                [&](const Eigen::VectorXd& p, Eigen::VectorXd& res) { res = inner(p).residuals; },
                s, cfg.optimizer);
        } catch (const Error&) {
            continue;
        }
        if (!r.converged) continue;
        if (!best || r.cost < best->cost) best = r;
    }
    if (!best) {
        throw NonConvergence("fit_calibration: joint fit did not converge");
    }
    const LevMarResult& lm = *best;

    const detail::JointLinearFit fin = inner(lm.params);
    ResonanceParams rp;
    rp.f0_hz = fc + fs * lm.params(0);
    rp.q = maps[1].to_physical(lm.params(1));

    // Split P + R/den back into background * resonance, i.e. find (C, w) with
    // P(u) + R/den(u) = C(u) (1 - w/den(u)) and w = (q/qc) e^{j phi0}.
    // Multiplying out, C (den - w) = P den + R, so den(u_w) = w at a root u_w
    // of the right side: w solves w P(u_w) + R = 0, and C follows by exact
    // polynomial division.  Newton from the pole-residue estimate
    // w0 = -R / P(u_p) converges in a few steps.
    std::vector<std::complex<double>> pcoef(static_cast<std::size_t>(degree) + 1);
    for (int m = 0; m <= degree; ++m) {
        pcoef[static_cast<std::size_t>(m)] = {fin.coeffs(2 * m), fin.coeffs(2 * m + 1)};
    }
    const std::complex<double> rres{fin.coeffs(2 * degree + 2), fin.coeffs(2 * degree + 3)};
    const std::complex<double> alpha{1.0, 2.0 * rp.q * (fc - rp.f0_hz) / rp.f0_hz};
    const std::complex<double> beta{0.0, 2.0 * rp.q * fs / rp.f0_hz};
    auto horner = [&](const std::complex<double>& u, bool derivative) {
        std::complex<double> acc = 0.0;
        if (derivative) {
            for (std::size_t m = pcoef.size(); m-- > 1;) {
                acc = acc * u + double(m) * pcoef[m];
            }
        } else {
            for (std::size_t m = pcoef.size(); m-- > 0;) acc = acc * u + pcoef[m];
        }
        return acc;
    };
    const std::complex<double> u_pole = -alpha / beta;
    const std::complex<double> p_at_pole = horner(u_pole, false);
    if (!(std::abs(p_at_pole) > 0.0)) {
        throw CircleFitFailed("fit_calibration: fitted background vanishes at the pole");
    }
    std::complex<double> w = -rres / p_at_pole;
    for (int it = 0; it < 25; ++it) {
        const std::complex<double> u_w = (w - alpha) / beta;
        const std::complex<double> h = w * horner(u_w, false) + rres;
        const std::complex<double> hp = horner(u_w, false) + w * horner(u_w, true) / beta;
        if (!(std::abs(hp) > 0.0)) break;
        const std::complex<double> step = h / hp;
        w -= step;
        if (!std::isfinite(w.real()) || !std::isfinite(w.imag())) {
            w = -rres / p_at_pole;
            break;
        }
        if (std::abs(step) < 1e-15 * (1.0 + std::abs(w))) break;
    }
    if (!(std::abs(w) > 1e-9)) {
        throw NoDipFound("fit_calibration: fitted model has no resonance dip");
    }
    rp.qc = rp.q / std::abs(w);
    rp.phi0 = std::arg(w);

    // C = (P den + R) / (den - w), exact division by the linear factor.
    {
        std::vector<std::complex<double>> num(static_cast<std::size_t>(degree) + 2);
        num[0] = pcoef[0] * alpha + rres;
        for (int m = 1; m <= degree; ++m) {
            num[static_cast<std::size_t>(m)] =
                pcoef[static_cast<std::size_t>(m)] * alpha +
                pcoef[static_cast<std::size_t>(m - 1)] * beta;
        }
        num[static_cast<std::size_t>(degree) + 1] = pcoef[static_cast<std::size_t>(degree)] * beta;
        const std::complex<double> root = (w - alpha) / beta;  // den(root) = w
        rp.background.center = fc;
        rp.background.scale = fs;
        rp.background.coeffs.assign(static_cast<std::size_t>(degree) + 1, 0.0);
        std::complex<double> carry = num[static_cast<std::size_t>(degree) + 1];
        for (int m = degree; m >= 0; --m) {
            rp.background.coeffs[static_cast<std::size_t>(m)] = carry / beta;
            carry = num[static_cast<std::size_t>(m)] + root * carry;
        }
    }

    chain.ellipse.i0 = 0.0;  // absorbed into the background's constant term
    chain.ellipse.q0 = 0.0;
    chain.ellipse.a_i = 1.0;
    chain.ellipse.a_q = maps[2].to_physical(lm.params(2));
    chain.ellipse.gamma = maps[3].to_physical(lm.params(3));
    chain.ellipse.validate();

    // The chain stores the complex background polynomial as real amplitude
    // and phase polynomials, densely refitted over the whole scan (smooth
    // functions, no masking, no extrapolation).
    std::vector<double> amp(n), pha(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::complex<double> v = rp.background.eval(work.freq_hz[k]);
        if (!(std::abs(v) > 0.0)) {
            throw CircleFitFailed("fit_calibration: fitted background vanishes inside the scan");
        }
        amp[k] = std::abs(v);
        pha[k] = std::arg(v);
    }
    detail::unwrap_inplace(pha);
    chain.bg_amplitude = detail::fit_poly(work.freq_hz, amp, fc, fs, degree + 2);
    chain.bg_phase = detail::fit_poly(work.freq_hz, pha, fc, fs, degree + 2);

    chain.asymmetry_theta_rad = cfg.asymmetry_theta.value_or(-rp.phi0);

    // Rotation: measured on the asymmetry-corrected band locus (where the
    // gap should sit on +I), applied about the pre-asymmetry circle center.
    // Conjugating a rotation through the affine asymmetry map preserves the
    // angle, so measuring after and applying before is exact.
    std::vector<IqPoint> pre_band(band_idx.size()), fin_band(band_idx.size());
    for (std::size_t k = 0; k < band_idx.size(); ++k) {
        const std::size_t idx = band_idx[k];
        const std::complex<double> w =
            detail::through_ellipse(work.s21[idx], chain.ellipse);
        const std::complex<double> z =
            apply_background(w, work.freq_hz[idx], chain.bg_amplitude, chain.bg_phase);
        pre_band[k] = {z.real(), z.imag()};
        const std::complex<double> zf = asymmetry_rotation(z, chain.asymmetry_theta_rad);
        fin_band[k] = {zf.real(), zf.imag()};
    }
    const CircleFit pre_fit = fit_circle(pre_band);
    const CenterRotation rot = center_rotation(fin_band);
    chain.center_rotation_rad = rot.angle;
    chain.rotation_center = pre_fit.circle;

    // Final calibration circle and residuals, via the assembled chain.  The
    // systematic metric runs the fitted model of the scan (noise-free by
    // construction) through the chain.
    auto band_circle = [&](const std::vector<std::complex<double>>& values,
                           const std::vector<double>& freqs) {
        std::vector<IqPoint> pts(band_idx.size());
        for (std::size_t k = 0; k < band_idx.size(); ++k) {
            const std::size_t idx = band_idx[k];
            const std::complex<double> z = chain.apply_point(freqs[idx], values[idx]);
            pts[k] = {z.real(), z.imag()};
        }
        return fit_circle(pts);
    };
    std::vector<std::complex<double>> model_raw(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::complex<double> z =
            detail::onto_ellipse(s21_model(work.freq_hz[k], rp), chain.ellipse);
        if (!delay.empty()) z += delay.at(work.freq_hz[k]);
        model_raw[k] = z;
    }
    const CircleFit model_fit = band_circle(model_raw, work.freq_hz);
    const CircleFit data_fit = band_circle(scan.s21, scan.freq_hz);
    chain.circle = model_fit.circle;
    chain.rms_over_radius = model_fit.rms / model_fit.circle.radius;
    chain.data_rms_over_radius = data_fit.rms / data_fit.circle.radius;
    if (!(chain.rms_over_radius <= 0.01)) {
        throw CircleFitFailed("fit_calibration: corrected locus is not circular to 1%");
    }
    return chain;
}

}  // namespace mkid
