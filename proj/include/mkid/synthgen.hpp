#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "mkid/dft.hpp"
#include "mkid/gap_fit.hpp"
#include "mkid/iq_cal.hpp"
#include "mkid/pulse_dsp.hpp"
#include "mkid/resonance.hpp"
#include "mkid/rng.hpp"

// Deterministic synthetic-data generator: the ground-truth oracle for every
// analysis stage.  All randomness flows from ScenarioConfig::seed through
// derive_seed sub-streams (one per generator, one per record), so outputs are
// bit-identical for identical configs and independent of evaluation order.
//
// Noise conventions:
//  - sweep noise: per-quadrature Gaussian sigma = 10^(-snr_db/20) relative to
//    the unit off-resonance carrier; snr_db = +infinity disables noise draws,
//    making the output equal the closed-form model exactly.
//  - record noise: white Gaussian of configured sigma; with f_knee_hz > 0 the
//    spectrum is shaped by sqrt(1 + knee/f) (synthesized in the frequency
//    domain), keeping the per-sample variance at sigma^2 for the white part.

namespace mkid {

struct ScenarioConfig {
    std::uint64_t seed = 424242;

    // resonance truth
    ResonanceParams resonance{5.3806e9, 4050.0, 10600.0, 1.004,
                              ScaledPoly<std::complex<double>>::constant(1.0)};
    int sweep_points = 801;
    double sweep_span_linewidths = 10.0;
    double sweep_snr_db = 40.0;

    // gap truth
    double delta_ev = 1.5e-4;
    double alpha = 0.05;
    double inv_qi0 = 1.0 / 6440.0;
    double kondo_b = 3e-6;
    double kondo_tk_k = 0.25;
    double temp_min_k = 0.04;
    double temp_max_k = 0.30;
    double temp_step_k = 0.01;
    double qi_frac_error = 0.01;

    // calibration truth; background polynomials are in the scaled scan
    // coordinate u = (f - f_center) / (half span), lowest degree first
    EllipseParams cal_ellipse{0.02, -0.015, 1.15, 0.93, 1.35};
    std::vector<double> cal_bg_amp{1.8, 0.02, 0.01};
    std::vector<double> cal_bg_phase{0.3, 0.05, -0.02};
    std::complex<double> cal_delay_lo{0.08, -0.05};
    std::complex<double> cal_delay_hi{-0.04, 0.10};
    double cal_center_rotation = 0.4;
    double cal_theta = 0.5;
    double iq_span_linewidths = 30.0;
    int iq_points = 16001;
    double iq_snr_db = 40.0;

    // pulse truth
    double tau_rise_s = 1.2e-6;
    double tau_fall_s = 4.0e-6;
    double amp_per_photon = 0.05;
    int onset_index = 1000;
    int jitter_samples = 50;

    // noise truth
    double white_sigma = 0.01;
    double f_knee_hz = 0.0;

    // acquisition
    double sample_rate_hz = 5e7;
    int record_length = 6000;
    int n_records = 1000;
    int n_noise_records = 200;

    // photon truth
    double mu = 12.4;
    double spectrum_shift = 0.7;  // used by standalone spectrum simulation

    void validate() const {
        resonance.background.eval(resonance.f0_hz);  // rejects empty polynomials
        if (!(resonance.f0_hz > 0.0) || !(resonance.q > 0.0) || !(resonance.qc > 0.0)) {
            throw InvalidInput("ScenarioConfig: resonance truth must be positive");
        }
        if (sweep_points < 16 || iq_points < 16) {
            throw InvalidInput("ScenarioConfig: too few sweep points");
        }
        if (!(sweep_span_linewidths > 0.0) || !(iq_span_linewidths > 0.0)) {
            throw InvalidInput("ScenarioConfig: spans must be positive");
        }
        if (!(delta_ev > 0.0) || !(alpha > 0.0) || alpha > 1.0 || !(inv_qi0 > 0.0) ||
            !(kondo_tk_k > 0.0)) {
            throw InvalidInput("ScenarioConfig: gap truth must be positive");
        }
        if (!(temp_min_k > 0.0) || !(temp_step_k > 0.0) || temp_max_k < temp_min_k) {
            throw InvalidInput("ScenarioConfig: bad temperature grid");
        }
        if (qi_frac_error < 0.0 || white_sigma < 0.0 || f_knee_hz < 0.0) {
            throw InvalidInput("ScenarioConfig: noise levels must be nonnegative");
        }
        cal_ellipse.validate();
        if (cal_bg_amp.empty() || cal_bg_phase.empty()) {
            throw InvalidInput("ScenarioConfig: background polynomials must be nonempty");
        }
        if (!(tau_rise_s > 0.0) || !(tau_rise_s < tau_fall_s)) {
            throw InvalidInput("ScenarioConfig: requires 0 < tau_rise < tau_fall");
        }
        if (!(amp_per_photon > 0.0) || !(mu >= 0.0)) {
            throw InvalidInput("ScenarioConfig: photon truth must be nonnegative");
        }
        if (!(sample_rate_hz > 0.0) || record_length < 16 || n_records < 1 ||
            n_noise_records < 0) {
            throw InvalidInput("ScenarioConfig: bad acquisition settings");
        }
        if (onset_index < 0 || onset_index >= record_length) {
            throw InvalidInput("ScenarioConfig: onset outside the record");
        }
        if (jitter_samples < 0 || onset_index - jitter_samples < 0 ||
            onset_index + jitter_samples >= record_length) {
            throw InvalidInput("ScenarioConfig: jitter range leaves the record");
        }
    }
};

namespace detail {

// Sub-stream tags for derive_seed; record streams hang off these.
inline constexpr std::uint64_t kStreamSweep = 1;
inline constexpr std::uint64_t kStreamQi = 2;
inline constexpr std::uint64_t kStreamSignal = 3;
inline constexpr std::uint64_t kStreamNoise = 4;
inline constexpr std::uint64_t kStreamIq = 5;

inline double pulse_peak_time(double tau_rise, double tau_fall) {
    return tau_rise * tau_fall / (tau_fall - tau_rise) * std::log(tau_fall / tau_rise);
}

inline double pulse_shape(double t_rel, double tau_rise, double tau_fall) {
    if (t_rel < 0.0) return 0.0;
    return std::exp(-t_rel / tau_fall) - std::exp(-t_rel / tau_rise);
}

// White or knee-shaped Gaussian noise; per-sample variance sigma^2 for the
// white component.  Shaped noise is synthesized in the frequency domain from
// independent bin coefficients with Hermitian symmetry.
inline std::vector<double> gen_noise(Rng& rng, int n, double sigma, double knee_hz,
                                     double sample_rate_hz) {
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    if (sigma == 0.0) return out;
    if (knee_hz <= 0.0) {
        for (auto& v : out) v = sigma * rng.normal();
        return out;
    }
    const double df = sample_rate_hz / n;
    auto shape = [&](double f) { return std::sqrt(1.0 + knee_hz / std::max(f, df)); };
    std::vector<cplx> spec(static_cast<std::size_t>(n), cplx{0.0, 0.0});
    const double half = std::sqrt(0.5 * n);
    spec[0] = sigma * shape(df) * std::sqrt(static_cast<double>(n)) * rng.normal();
    for (int k = 1; k < (n + 1) / 2; ++k) {
        const cplx g{rng.normal(), rng.normal()};
        spec[static_cast<std::size_t>(k)] = sigma * shape(k * df) * half * g;
        spec[static_cast<std::size_t>(n - k)] = std::conj(spec[static_cast<std::size_t>(k)]);
    }
    if (n % 2 == 0) {
        spec[static_cast<std::size_t>(n / 2)] =
            sigma * shape(0.5 * sample_rate_hz) * std::sqrt(static_cast<double>(n)) * rng.normal();
    }
    const std::vector<cplx> x = idft(spec);
    for (int k = 0; k < n; ++k) out[static_cast<std::size_t>(k)] = x[static_cast<std::size_t>(k)].real();
    return out;
}

inline double snr_sigma(double snr_db) {
    return std::isinf(snr_db) ? 0.0 : std::pow(10.0, -snr_db / 20.0);
}

}  // namespace detail

inline ComplexSweep gen_sweep(const ScenarioConfig& cfg) {
    cfg.validate();
    const double lw = cfg.resonance.f0_hz / cfg.resonance.q;
    const double half = 0.5 * cfg.sweep_span_linewidths * lw;
    const double sigma = detail::snr_sigma(cfg.sweep_snr_db);
    Rng rng(derive_seed(cfg.seed, detail::kStreamSweep));

    ComplexSweep out;
    out.meta.resonator_id = "synth-0";
    out.freq_hz.resize(static_cast<std::size_t>(cfg.sweep_points));
    out.s21.resize(static_cast<std::size_t>(cfg.sweep_points));
    for (int k = 0; k < cfg.sweep_points; ++k) {
        const double f = cfg.resonance.f0_hz - half +
                         2.0 * half * k / static_cast<double>(cfg.sweep_points - 1);
        std::complex<double> v = s21_model(f, cfg.resonance);
        if (sigma > 0.0) v += std::complex<double>{sigma * rng.normal(), sigma * rng.normal()};
        out.freq_hz[static_cast<std::size_t>(k)] = f;
        out.s21[static_cast<std::size_t>(k)] = v;
    }
    return out;
}

inline QiSeries gen_qi_series(const ScenarioConfig& cfg) {
    cfg.validate();
    const double omega = 2.0 * pi * cfg.resonance.f0_hz;
    Rng rng(derive_seed(cfg.seed, detail::kStreamQi));

    QiSeries out;
    out.f0_hz = cfg.resonance.f0_hz;
    out.resonator_id = "synth-0";
    for (double t = cfg.temp_min_k; t <= cfg.temp_max_k + 0.5 * cfg.temp_step_k;
         t += cfg.temp_step_k) {
        const double truth = inv_qi_model_kondo(t, cfg.delta_ev, cfg.inv_qi0, cfg.alpha, omega,
                                                cfg.kondo_b, cfg.kondo_tk_k);
        const double err = cfg.qi_frac_error * truth;
        out.temperature_k.push_back(t);
        out.inv_qi.push_back(err > 0.0 ? truth + err * rng.normal() : truth);
        out.inv_qi_err.push_back(err > 0.0 ? err : 1e-6 * truth);
    }
    return out;
}

// Double exponential with amp as its analytic peak value.
inline std::vector<double> gen_pulse(const std::vector<double>& t_s, double onset_s, double amp,
                                     double tau_rise_s, double tau_fall_s) {
    if (!(tau_rise_s > 0.0) || !(tau_rise_s < tau_fall_s)) {
        throw InvalidInput("gen_pulse: requires 0 < tau_rise < tau_fall");
    }
    const double peak = detail::pulse_shape(detail::pulse_peak_time(tau_rise_s, tau_fall_s),
                                            tau_rise_s, tau_fall_s);
    std::vector<double> out(t_s.size());
    for (std::size_t k = 0; k < t_s.size(); ++k) {
        out[k] = amp / peak * detail::pulse_shape(t_s[k] - onset_s, tau_rise_s, tau_fall_s);
    }
    return out;
}

struct RecordSet {
    std::vector<Record> signal;
    std::vector<Record> noise;
};

inline RecordSet gen_records(const ScenarioConfig& cfg) {
    cfg.validate();
    const double dt = 1.0 / cfg.sample_rate_hz;
    const double peak = detail::pulse_shape(
        detail::pulse_peak_time(cfg.tau_rise_s, cfg.tau_fall_s), cfg.tau_rise_s, cfg.tau_fall_s);
    const std::uint64_t sig_base = derive_seed(cfg.seed, detail::kStreamSignal);
    const std::uint64_t noi_base = derive_seed(cfg.seed, detail::kStreamNoise);

    RecordSet out;
    out.signal.reserve(static_cast<std::size_t>(cfg.n_records));
    out.noise.reserve(static_cast<std::size_t>(cfg.n_noise_records));

    for (int r = 0; r < cfg.n_records; ++r) {
        Rng rng(derive_seed(sig_base, static_cast<std::uint64_t>(r)));
        const long n_photons = rng.poisson(cfg.mu);
        const int jitter =
            cfg.jitter_samples == 0
                ? 0
                : static_cast<int>(std::floor(rng.uniform01() * (2 * cfg.jitter_samples + 1))) -
                      cfg.jitter_samples;
        const double onset_t = (cfg.onset_index + jitter) * dt;
        const double amp = static_cast<double>(n_photons) * cfg.amp_per_photon;

        Record rec;
        rec.sample_rate_hz = cfg.sample_rate_hz;
        rec.samples = detail::gen_noise(rng, cfg.record_length, cfg.white_sigma, cfg.f_knee_hz,
                                        cfg.sample_rate_hz);
        if (amp > 0.0) {
            for (int k = 0; k < cfg.record_length; ++k) {
                rec.samples[static_cast<std::size_t>(k)] +=
                    amp / peak *
                    detail::pulse_shape(k * dt - onset_t, cfg.tau_rise_s, cfg.tau_fall_s);
            }
        }
        out.signal.push_back(std::move(rec));
    }
    for (int r = 0; r < cfg.n_noise_records; ++r) {
        Rng rng(derive_seed(noi_base, static_cast<std::uint64_t>(r)));
        Record rec;
        rec.sample_rate_hz = cfg.sample_rate_hz;
        rec.samples = detail::gen_noise(rng, cfg.record_length, cfg.white_sigma, cfg.f_knee_hz,
                                        cfg.sample_rate_hz);
        rec.tag = "noise";
        out.noise.push_back(std::move(rec));
    }
    return out;
}

struct DistortedIq {
    ComplexSweep distorted;  // what the instrument would record
    ComplexSweep ideal;      // symmetric resonance the chain should restore
    DelayProfile delay;      // tabulated truth handed to the correction
    double band_lo_hz = 0.0;
    double band_hi_hz = 0.0;
};

// Forward distortion chain: exact inverses of the five corrections applied in
// reverse correction order (asymmetry, center rotation, background, ellipse,
// delay).  A correction chain fitted with the true parameters restores the
// ideal sweep exactly.
inline DistortedIq gen_distorted_iq(const ScenarioConfig& cfg) {
    cfg.validate();
    const double f0 = cfg.resonance.f0_hz;
    const double lw = f0 / cfg.resonance.q;
    const double half = 0.5 * cfg.iq_span_linewidths * lw;
    const double f_lo = f0 - half, f_hi = f0 + half;
    const double sigma = detail::snr_sigma(cfg.iq_snr_db);
    Rng rng(derive_seed(cfg.seed, detail::kStreamIq));

    // Ideal symmetric circle: center c0 on the real axis, far point at 1.
    const std::complex<double> c0{1.0 - 0.5 * cfg.resonance.q / cfg.resonance.qc, 0.0};
    const double theta = cfg.cal_theta;
    const std::complex<double> asym_inv_scale = std::polar(1.0 / std::cos(theta), -theta);
    const std::complex<double> c1 = 1.0 - asym_inv_scale * (1.0 - c0);
    const std::complex<double> rot = std::polar(1.0, -cfg.cal_center_rotation);

    auto bg_eval = [](const std::vector<double>& c, double u) {
        double acc = 0.0;
        for (std::size_t k = c.size(); k-- > 0;) acc = acc * u + c[k];
        return acc;
    };

    DistortedIq out;
    out.band_lo_hz = f0 - 5.0 * lw;
    out.band_hi_hz = f0 + 5.0 * lw;
    out.delay.freq_hz = {f_lo, f_hi};
    out.delay.value = {cfg.cal_delay_lo, cfg.cal_delay_hi};

    out.ideal.meta.resonator_id = "synth-0";
    out.distorted.meta.resonator_id = "synth-0";
    for (int k = 0; k < cfg.iq_points; ++k) {
        const double f = f_lo + (f_hi - f_lo) * k / static_cast<double>(cfg.iq_points - 1);
        const double u = (f - f0) / half;
        const std::complex<double> z0 = s21_ideal(f, f0, cfg.resonance.q, cfg.resonance.qc);

        std::complex<double> z = 1.0 - asym_inv_scale * (1.0 - z0);  // undo-able asymmetry
        z = c1 + rot * (z - c1);                                     // rotation about center
        z *= std::polar(bg_eval(cfg.cal_bg_amp, u), bg_eval(cfg.cal_bg_phase, u));
        const double x = z.real(), y = z.imag();
        z = {cfg.cal_ellipse.i0 + cfg.cal_ellipse.a_i * x,
             cfg.cal_ellipse.q0 +
                 cfg.cal_ellipse.a_q * (x * std::cos(cfg.cal_ellipse.gamma) +
                                        y * std::sin(cfg.cal_ellipse.gamma))};
        z += out.delay.at(f);
        if (sigma > 0.0) z += std::complex<double>{sigma * rng.normal(), sigma * rng.normal()};

        out.ideal.freq_hz.push_back(f);
        out.ideal.s21.push_back(z0);
        out.distorted.freq_hz.push_back(f);
        out.distorted.s21.push_back(z);
    }
    return out;
}

}  // namespace mkid
