#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <limits>
#include <vector>

#include "mkid/iq_cal.hpp"
#include "mkid/rng.hpp"
#include "mkid/synthgen.hpp"

using namespace mkid;

namespace {

std::vector<IqPoint> sample_ellipse(const EllipseParams& e, int n) {
    std::vector<IqPoint> pts;
    pts.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) pts.push_back(e.at(2.0 * pi * k / n));
    return pts;
}

}  // namespace

// ---------------------------------------------------------------------------
// cable delay

TEST_CASE("delay profile interpolates linearly and rejects extrapolation", "[iqcal]") {
    DelayProfile d;
    d.freq_hz = {1e9, 2e9, 4e9};
    d.value = {{1.0, 0.0}, {3.0, 2.0}, {3.0, -2.0}};
    CHECK(std::abs(d.at(1e9) - std::complex<double>(1.0, 0.0)) < 1e-15);
    CHECK(std::abs(d.at(1.5e9) - std::complex<double>(2.0, 1.0)) < 1e-15);
    CHECK(std::abs(d.at(3e9) - std::complex<double>(3.0, 0.0)) < 1e-15);
    CHECK(std::abs(d.at(4e9) - std::complex<double>(3.0, -2.0)) < 1e-15);
    CHECK_THROWS_AS(d.at(0.9e9), FrequencyOutOfRange);
    CHECK_THROWS_AS(d.at(4.1e9), FrequencyOutOfRange);
    DelayProfile bad;
    bad.freq_hz = {1e9};
    bad.value = {{0.0, 0.0}};
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("delay correction restores the undelayed sweep", "[iqcal]") {
    ComplexSweep sweep;
    for (int k = 0; k < 64; ++k) {
        sweep.freq_hz.push_back(5e9 + 1e5 * k);
        sweep.s21.push_back(std::polar(1.0, 0.01 * k));
    }
    DelayProfile d;
    d.freq_hz = {sweep.freq_hz.front(), sweep.freq_hz.back()};
    d.value = {{0.08, -0.05}, {-0.04, 0.10}};
    ComplexSweep shifted = sweep;
    for (std::size_t k = 0; k < shifted.s21.size(); ++k) {
        shifted.s21[k] += d.at(shifted.freq_hz[k]);
    }
    const ComplexSweep restored = correct_cable_delay(shifted, d);
    for (std::size_t k = 0; k < sweep.s21.size(); ++k) {
        CHECK(std::abs(restored.s21[k] - sweep.s21[k]) < 1e-15);
    }
}

// ---------------------------------------------------------------------------
// mixer ellipse

TEST_CASE("ellipse fit recovers the reference parameterization", "[iqcal]") {
    // I = 0.1 + 2 cos(t), Q = -0.05 + 1.5 cos(t + 1.3); the fitted gamma is
    // canonicalized into (0, pi), which leaves this value unchanged.
    std::vector<IqPoint> pts;
    for (int k = 0; k < 720; ++k) {
        const double t = 2.0 * pi * k / 720.0;
        pts.push_back({0.1 + 2.0 * std::cos(t), -0.05 + 1.5 * std::cos(t + 1.3)});
    }
    const EllipseFit fit = fit_ellipse(pts);
    CHECK(std::abs(fit.params.i0 - 0.1) < 1e-6);
    CHECK(std::abs(fit.params.q0 + 0.05) < 1e-6);
    CHECK(std::abs(fit.params.a_i - 2.0) < 1e-6);
    CHECK(std::abs(fit.params.a_q - 1.5) < 1e-6);
    CHECK(std::abs(fit.params.gamma - 1.3) < 1e-6);
}

TEST_CASE("unit circle fits as the trivial ellipse", "[iqcal]") {
    EllipseParams unit;
    const EllipseFit fit = fit_ellipse(sample_ellipse(unit, 64));
    CHECK(std::abs(fit.params.i0) < 1e-12);
    CHECK(std::abs(fit.params.q0) < 1e-12);
    CHECK(std::abs(fit.params.a_i - 1.0) < 1e-12);
    CHECK(std::abs(fit.params.a_q - 1.0) < 1e-12);
    CHECK(std::abs(fit.params.gamma - 0.5 * pi) < 1e-12);
}

TEST_CASE("random ellipses round-trip through fit and correction", "[iqcal]") {
    Rng rng(20240817);
    for (int trial = 0; trial < 100; ++trial) {
        EllipseParams truth;
        truth.i0 = rng.uniform(-1.0, 1.0);
        truth.q0 = rng.uniform(-1.0, 1.0);
        truth.a_i = rng.uniform(0.5, 2.0);
        truth.a_q = rng.uniform(0.5, 2.0);
        truth.gamma = rng.uniform(0.3, pi - 0.3);
        const auto pts = sample_ellipse(truth, 256);
        const EllipseFit fit = fit_ellipse(pts);
        CHECK(std::abs(fit.params.i0 - truth.i0) < 1e-9);
        CHECK(std::abs(fit.params.q0 - truth.q0) < 1e-9);
        CHECK(std::abs(fit.params.a_i - truth.a_i) < 1e-9);
        CHECK(std::abs(fit.params.a_q - truth.a_q) < 1e-9);
        CHECK(std::abs(fit.params.gamma - truth.gamma) < 1e-9);
        // corrected points land on the unit circle
        for (std::size_t k = 0; k < pts.size(); k += 16) {
            const IqPoint c = ellipse_to_circle(pts[k], fit.params);
            CHECK(std::abs(std::hypot(c.i, c.q) - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("degenerate point sets are rejected", "[iqcal]") {
    std::vector<IqPoint> line;
    for (int k = 0; k < 32; ++k) line.push_back({0.1 * k, 0.2 * k + 1.0});
    CHECK_THROWS_AS(fit_ellipse(line), DegenerateConic);
    CHECK_THROWS_AS(fit_ellipse(std::vector<IqPoint>(5)), InvalidInput);
}

// ---------------------------------------------------------------------------
// background

TEST_CASE("masked background fit recovers smooth trends to 0.1%", "[iqcal]") {
    // Amplitude 2 + 1e-9 f, linear phase, and a weak dip confined to the
    // center; wings more than 20 linewidths out are background-dominated.
    const double f0 = 5.0e9, q = 4000.0, qc = 8.0e5;  // dip depth 5e-3
    ComplexSweep scan;
    const double half = 40.0 * f0 / q;  // +-40 linewidths
    for (int k = 0; k < 2001; ++k) {
        const double f = f0 - half + 2.0 * half * k / 2000.0;
        const std::complex<double> bg =
            (2.0 + 1e-9 * f) * std::polar(1.0, 0.3 + 2e-11 * (f - f0));
        scan.freq_hz.push_back(f);
        scan.s21.push_back(bg * s21_ideal(f, f0, q, qc));
    }
    const double band_lo = f0 - 20.0 * f0 / q, band_hi = f0 + 20.0 * f0 / q;
    const BackgroundFit fit = fit_background(scan, band_lo, band_hi, 2);
    for (std::size_t k = 0; k < scan.freq_hz.size(); k += 100) {
        const double f = scan.freq_hz[k];
        CHECK(std::abs(fit.amplitude.eval(f) / (2.0 + 1e-9 * f) - 1.0) < 1e-3);
        CHECK(std::abs(fit.phase.eval(f) - (0.3 + 2e-11 * (f - f0))) < 1e-3);
    }
    // dividing the background out restores the bare resonance
    for (std::size_t k = 0; k < scan.freq_hz.size(); k += 200) {
        const double f = scan.freq_hz[k];
        const std::complex<double> bare =
            apply_background(scan.s21[k], f, fit.amplitude, fit.phase);
        CHECK(std::abs(bare - s21_ideal(f, f0, q, qc)) < 2e-3);
    }
}

TEST_CASE("background fit needs enough wing coverage", "[iqcal]") {
    ComplexSweep scan;
    for (int k = 0; k < 64; ++k) {
        scan.freq_hz.push_back(5e9 + 1e5 * k);
        scan.s21.push_back({1.0, 0.0});
    }
    // band swallows all but 4 points
    CHECK_THROWS_AS(
        fit_background(scan, scan.freq_hz[2], scan.freq_hz[61], 2),
        InsufficientBackground);
    // band outside the scan leaves one empty wing
    CHECK_THROWS_AS(
        fit_background(scan, scan.freq_hz.back() + 1e5, scan.freq_hz.back() + 2e5, 2),
        InsufficientBackground);
}

// ---------------------------------------------------------------------------
// circle + rotation

TEST_CASE("circle fit is exact on circle points", "[iqcal]") {
    std::vector<IqPoint> pts;
    for (int k = 0; k < 40; ++k) {
        const double t = 2.0 * pi * k / 40.0;
        pts.push_back({0.3 + 0.25 * std::cos(t), -0.7 + 0.25 * std::sin(t)});
    }
    const CircleFit fit = fit_circle(pts);
    CHECK(std::abs(fit.circle.ci - 0.3) < 1e-12);
    CHECK(std::abs(fit.circle.cq + 0.7) < 1e-12);
    CHECK(std::abs(fit.circle.radius - 0.25) < 1e-12);
    CHECK(fit.rms < 1e-12);
}

TEST_CASE("gap rotation brings the locus opening onto +I", "[iqcal]") {
    // Arc covering everything except a gap centered at angle +pi/2.
    std::vector<IqPoint> pts;
    for (int k = 0; k < 200; ++k) {
        const double t = 0.5 * pi + 0.4 + (2.0 * pi - 0.8) * k / 199.0;
        pts.push_back({1.0 + 0.5 * std::cos(t), -2.0 + 0.5 * std::sin(t)});
    }
    std::vector<IqPoint> rotated = pts;
    const CenterRotation rot = center_rotation(rotated);
    CHECK(std::abs(rot.angle + 0.5 * pi) < 1e-6);
    // gap midpoint now sits on the +I axis: the two edge points straddle it
    const double a0 = std::atan2(rotated.front().q + 2.0, rotated.front().i - 1.0);
    const double a1 = std::atan2(rotated.back().q + 2.0, rotated.back().i - 1.0);
    CHECK(std::abs(a0 + a1) < 1e-6);  // symmetric about angle zero

    // a locus already opening toward +I is left alone
    std::vector<IqPoint> aligned;
    for (int k = 0; k < 200; ++k) {
        const double t = 0.4 + (2.0 * pi - 0.8) * k / 199.0;
        aligned.push_back({0.5 * std::cos(t), 0.5 * std::sin(t)});
    }
    const CenterRotation none = center_rotation(aligned);
    CHECK(std::abs(none.angle) < 1e-9);
}

TEST_CASE("rotation refuses a non-circular cloud", "[iqcal]") {
    Rng rng(5);
    std::vector<IqPoint> cloud;
    for (int k = 0; k < 100; ++k) cloud.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    CHECK_THROWS_AS(center_rotation(cloud), CircleFitFailed);
}

// ---------------------------------------------------------------------------
// asymmetry + readout transforms

TEST_CASE("asymmetry rotation basics", "[iqcal]") {
    CHECK(std::abs(asymmetry_rotation({0.3, -0.2}, 0.0) - std::complex<double>(0.3, -0.2)) <
          1e-15);
    // unity transmission is a fixed point for every theta
    for (double th : {-1.2, -0.3, 0.4, 1.5}) {
        CHECK(std::abs(asymmetry_rotation({1.0, 0.0}, th) - 1.0) < 1e-15);
    }
    CHECK_THROWS_AS(asymmetry_rotation({0.0, 0.0}, 0.5 * pi), InvalidInput);
    CHECK_THROWS_AS(asymmetry_rotation({0.0, 0.0}, -2.0), InvalidInput);
}

TEST_CASE("asymmetry with theta = -phi0 symmetrizes the resonance", "[iqcal]") {
    const double f0 = 5.3806e9, q = 4050.0, qc = 10600.0, phi0 = 0.83;
    // on-resonance and far-field points map to the real axis: these are the
    // diameter endpoints of the symmetrized circle
    const std::complex<double> dip = asymmetry_rotation(
        s21_resonance(f0, f0, q, qc, phi0), -phi0);
    CHECK(std::abs(dip.imag()) < 1e-9);
    CHECK(dip.real() == Catch::Approx(1.0 - (q / qc) * std::cos(phi0)).epsilon(1e-9));
    // every corrected point lies on the ideal circle through those endpoints
    const double dep = (q / qc) * std::cos(phi0);
    for (int k = -30; k <= 30; ++k) {
        const double f = f0 * (1.0 + 0.3 * k / q);
        const std::complex<double> z =
            asymmetry_rotation(s21_resonance(f, f0, q, qc, phi0), -phi0);
        CHECK(std::abs(std::abs(z - (1.0 - 0.5 * dep)) - 0.5 * dep) < 1e-9);
    }
}

TEST_CASE("reciprocal readout straightens the ideal resonance", "[iqcal]") {
    const double f0 = 5.3806e9, q = 4050.0, qc = 10600.0;
    for (int k = -20; k <= 20; ++k) {
        const double f = f0 * (1.0 + 0.4 * k / q);
        const std::complex<double> m = mobius_readout(s21_ideal(f, f0, q, qc));
        CHECK(std::abs(m.real() - qc / q) < 1e-9);
        CHECK(m.imag() == Catch::Approx(2.0 * qc * (f - f0) / f0).margin(1e-6));
    }
    CHECK_THROWS_AS(mobius_readout({1.0, 0.0}), PoleAtUnity);
    CHECK_THROWS_AS(mobius_readout({1.0, 1e-13}), PoleAtUnity);
}

TEST_CASE("phase-amplitude readout unwraps around the circle center", "[iqcal]") {
    IqTrace trace;
    for (int k = 0; k < 400; ++k) {
        const double t = -2.5 + 5.0 * k / 399.0;  // sweeps through +-pi wrap
        trace.axis.push_back(k);
        trace.i.push_back(0.2 + 0.4 * std::cos(t + pi));
        trace.q.push_back(-0.1 + 0.4 * std::sin(t + pi));
    }
    const PhaseAmplitude pa = phase_amplitude(trace, {0.2, -0.1, 0.4});
    for (std::size_t k = 0; k < pa.phase.size(); ++k) {
        CHECK(std::abs(pa.amplitude[k] - 1.0) < 1e-12);
        if (k > 0) CHECK(std::abs(pa.phase[k] - pa.phase[k - 1]) < 0.5);
    }
    const double span = pa.phase.back() - pa.phase.front();
    CHECK(span == Catch::Approx(5.0).epsilon(1e-9));
}

// ---------------------------------------------------------------------------
// assembled chain

TEST_CASE("default chain is the identity", "[iqcal]") {
    CalibrationChain chain;
    for (double f : {4.9e9, 5.0e9, 5.1e9}) {
        const std::complex<double> z{0.37, -0.81};
        CHECK(std::abs(chain.apply_point(f, z) - z) < 1e-12);
    }
}

TEST_CASE("fitted chain makes the distorted locus circular", "[iqcal]") {
    ScenarioConfig cfg;
    const DistortedIq iq = gen_distorted_iq(cfg);
    CalibrationConfig cc;
    cc.band_lo_hz = iq.band_lo_hz;
    cc.band_hi_hz = iq.band_hi_hz;
    const CalibrationChain chain = fit_calibration(iq.distorted, iq.delay, cc);

    // shape parameters: the skew is gauge-invariant, the axis ratio is
    // recovered up to the (a_i, a_q) common scale
    CHECK(std::abs(chain.ellipse.gamma - cfg.cal_ellipse.gamma) < 0.01);
    CHECK(std::abs(chain.ellipse.a_q / chain.ellipse.a_i -
                   cfg.cal_ellipse.a_q / cfg.cal_ellipse.a_i) < 0.01);
    CHECK(chain.rms_over_radius < 0.01);

    // the noise-free distorted locus, corrected by the chain fitted on noisy
    // data, must land on a circle to 0.1% of its radius
    ScenarioConfig clean = cfg;
    clean.iq_snr_db = std::numeric_limits<double>::infinity();
    const DistortedIq ref = gen_distorted_iq(clean);
    std::vector<IqPoint> pts;
    for (std::size_t k = 0; k < ref.distorted.freq_hz.size(); ++k) {
        const double f = ref.distorted.freq_hz[k];
        if (f < iq.band_lo_hz || f > iq.band_hi_hz) continue;
        const std::complex<double> z = chain.apply_point(f, ref.distorted.s21[k]);
        pts.push_back({z.real(), z.imag()});
    }
    const CircleFit fit = fit_circle(pts);
    CHECK(fit.rms / fit.circle.radius < 1e-3);
}

TEST_CASE("noise-free distortion is corrected essentially exactly", "[iqcal]") {
    ScenarioConfig cfg;
    cfg.iq_snr_db = std::numeric_limits<double>::infinity();
    const DistortedIq iq = gen_distorted_iq(cfg);
    CalibrationConfig cc;
    cc.band_lo_hz = iq.band_lo_hz;
    cc.band_hi_hz = iq.band_hi_hz;
    const CalibrationChain chain = fit_calibration(iq.distorted, iq.delay, cc);
    CHECK(std::abs(chain.ellipse.gamma - cfg.cal_ellipse.gamma) < 1e-4);
    CHECK(chain.rms_over_radius < 1e-6);
    CHECK(chain.data_rms_over_radius < 1e-6);
}

TEST_CASE("calibration input validation", "[iqcal]") {
    ScenarioConfig cfg;
    cfg.iq_points = 64;
    const DistortedIq iq = gen_distorted_iq(cfg);
    CalibrationConfig cc;
    cc.band_lo_hz = iq.band_hi_hz;  // inverted band
    cc.band_hi_hz = iq.band_lo_hz;
    CHECK_THROWS_AS(fit_calibration(iq.distorted, iq.delay, cc), InvalidInput);
    cc.band_lo_hz = iq.distorted.freq_hz.front();  // band swallows the scan
    cc.band_hi_hz = iq.distorted.freq_hz.back();
    CHECK_THROWS_AS(fit_calibration(iq.distorted, iq.delay, cc), InvalidInput);
}

TEST_CASE("trace/sweep conversions are inverses", "[iqcal]") {
    ComplexSweep sweep;
    for (int k = 0; k < 32; ++k) {
        sweep.freq_hz.push_back(5e9 + 1e5 * k);
        sweep.s21.push_back({0.1 * k, -0.05 * k});
    }
    const ComplexSweep back = to_sweep(to_trace(sweep));
    REQUIRE(back.freq_hz.size() == sweep.freq_hz.size());
    for (std::size_t k = 0; k < sweep.freq_hz.size(); ++k) {
        CHECK(back.freq_hz[k] == sweep.freq_hz[k]);
        CHECK(back.s21[k] == sweep.s21[k]);
    }
}
