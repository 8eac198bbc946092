#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mkid/synthgen.hpp"

using namespace mkid;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("generators are bit-deterministic", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.n_records = 8;
    cfg.n_noise_records = 2;
    const ComplexSweep s1 = gen_sweep(cfg), s2 = gen_sweep(cfg);
    REQUIRE(s1.freq_hz.size() == s2.freq_hz.size());
    for (std::size_t k = 0; k < s1.s21.size(); ++k) CHECK(s1.s21[k] == s2.s21[k]);

    const QiSeries q1 = gen_qi_series(cfg), q2 = gen_qi_series(cfg);
    for (std::size_t k = 0; k < q1.inv_qi.size(); ++k) CHECK(q1.inv_qi[k] == q2.inv_qi[k]);

    const RecordSet r1 = gen_records(cfg), r2 = gen_records(cfg);
    REQUIRE(r1.signal.size() == r2.signal.size());
    for (std::size_t r = 0; r < r1.signal.size(); ++r) {
        CHECK(r1.signal[r].samples == r2.signal[r].samples);
    }
    const DistortedIq d1 = gen_distorted_iq(cfg), d2 = gen_distorted_iq(cfg);
    for (std::size_t k = 0; k < d1.distorted.s21.size(); k += 500) {
        CHECK(d1.distorted.s21[k] == d2.distorted.s21[k]);
    }
}

TEST_CASE("per-record streams do not depend on the record count", "[synthgen]") {
    ScenarioConfig a;
    a.n_records = 3;
    a.n_noise_records = 1;
    ScenarioConfig b = a;
    b.n_records = 12;
    b.n_noise_records = 5;
    const RecordSet ra = gen_records(a), rb = gen_records(b);
    for (std::size_t r = 0; r < ra.signal.size(); ++r) {
        CHECK(ra.signal[r].samples == rb.signal[r].samples);
    }
    CHECK(ra.noise[0].samples == rb.noise[0].samples);
}

TEST_CASE("disabling noise reproduces the closed-form models exactly", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.sweep_snr_db = kInf;
    cfg.qi_frac_error = 0.0;
    cfg.iq_snr_db = kInf;
    const ComplexSweep sweep = gen_sweep(cfg);
    for (std::size_t k = 0; k < sweep.freq_hz.size(); k += 37) {
        CHECK(sweep.s21[k] == s21_model(sweep.freq_hz[k], cfg.resonance));
    }
    const QiSeries qi = gen_qi_series(cfg);
    const double omega = 2.0 * pi * cfg.resonance.f0_hz;
    for (std::size_t k = 0; k < qi.temperature_k.size(); ++k) {
        const double want =
            inv_qi_model_kondo(qi.temperature_k[k], cfg.delta_ev, cfg.inv_qi0, cfg.alpha, omega,
                               cfg.kondo_b, cfg.kondo_tk_k);
        CHECK(qi.inv_qi[k] == want);
        CHECK(qi.inv_qi_err[k] == Catch::Approx(1e-6 * want).epsilon(1e-12));
    }
    // the distorted scan's companion "ideal" is the symmetric resonance
    const DistortedIq iq = gen_distorted_iq(cfg);
    for (std::size_t k = 0; k < iq.ideal.freq_hz.size(); k += 997) {
        const double f = iq.ideal.freq_hz[k];
        CHECK(iq.ideal.s21[k] ==
              s21_ideal(f, cfg.resonance.f0_hz, cfg.resonance.q, cfg.resonance.qc));
    }
}

TEST_CASE("pulse shape peaks at the analytic maximum", "[synthgen]") {
    const double tr = 1.2e-6, tf = 4.0e-6;
    const double tpk = detail::pulse_peak_time(tr, tf);
    CHECK(tpk == Catch::Approx(tr * tf / (tf - tr) * std::log(tf / tr)).epsilon(1e-14));
    // build a grid that contains the exact peak instant
    std::vector<double> t;
    for (int k = 0; k < 200; ++k) t.push_back(k * 5e-8);
    t.push_back(1e-6 + tpk);
    std::sort(t.begin(), t.end());
    const std::vector<double> p = gen_pulse(t, 1e-6, 0.05, tr, tf);
    const double maxv = *std::max_element(p.begin(), p.end());
    CHECK(maxv == Catch::Approx(0.05).epsilon(1e-12));
    // derivative vanishes at the peak: neighbors on a fine grid sit below
    for (std::size_t k = 0; k < t.size(); ++k) {
        if (t[k] < 1e-6) CHECK(p[k] == 0.0);  // nothing before onset
        CHECK(p[k] <= maxv);
    }
    CHECK_THROWS_AS(gen_pulse(t, 0.0, 1.0, 4e-6, 1.2e-6), InvalidInput);
    CHECK_THROWS_AS(gen_pulse(t, 0.0, 1.0, 0.0, 1.0), InvalidInput);
}

TEST_CASE("record photon counts follow the configured mean", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.white_sigma = 0.0;
    cfg.jitter_samples = 0;
    cfg.n_records = 10000;
    cfg.n_noise_records = 0;
    const RecordSet recs = gen_records(cfg);

    // with zero noise and zero jitter every record is an exact multiple of
    // the unit pulse; read the multiplicity off a mid-pulse sample
    const double dt = 1.0 / cfg.sample_rate_hz;
    std::vector<double> t(static_cast<std::size_t>(cfg.record_length));
    for (int k = 0; k < cfg.record_length; ++k) t[static_cast<std::size_t>(k)] = k * dt;
    const std::vector<double> unit =
        gen_pulse(t, cfg.onset_index * dt, cfg.amp_per_photon, cfg.tau_rise_s, cfg.tau_fall_s);
    const std::size_t probe = static_cast<std::size_t>(cfg.onset_index + 120);
    REQUIRE(unit[probe] > 0.0);

    double sum = 0.0;
    for (const Record& r : recs.signal) {
        const double n = r.samples[probe] / unit[probe];
        CHECK(std::abs(n - std::round(n)) < 1e-9);
        sum += n;
    }
    const double mean = sum / static_cast<double>(cfg.n_records);
    const double three_sigma = 3.0 * std::sqrt(cfg.mu / cfg.n_records);
    CHECK(std::abs(mean - cfg.mu) < three_sigma);
}

TEST_CASE("onset jitter is bounded and spread; zero jitter pins the onset", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.white_sigma = 0.0;
    cfg.n_records = 400;
    cfg.n_noise_records = 0;
    cfg.mu = 30.0;  // essentially every record has a pulse
    const RecordSet recs = gen_records(cfg);

    auto first_nonzero = [](const Record& r) {
        for (std::size_t k = 0; k < r.samples.size(); ++k) {
            if (r.samples[k] != 0.0) return static_cast<int>(k);
        }
        return -1;
    };
    std::vector<double> onsets;
    for (const Record& r : recs.signal) {
        const int k = first_nonzero(r);
        if (k < 0) continue;  // empty record
        CHECK(k >= cfg.onset_index - cfg.jitter_samples);
        CHECK(k <= cfg.onset_index + cfg.jitter_samples + 1);
        onsets.push_back(k);
    }
    REQUIRE(onsets.size() > 390);
    const double mean = std::accumulate(onsets.begin(), onsets.end(), 0.0) / onsets.size();
    double var = 0.0;
    for (double v : onsets) var += (v - mean) * (v - mean);
    var /= static_cast<double>(onsets.size() - 1);
    // uniform over +-50 samples has sd ~29; require a wide spread
    CHECK(std::sqrt(var) > 20.0);
    CHECK(std::sqrt(var) < 40.0);

    cfg.jitter_samples = 0;
    cfg.n_records = 50;
    const RecordSet pinned = gen_records(cfg);
    for (const Record& r : pinned.signal) {
        const int k = first_nonzero(r);
        if (k >= 0) CHECK(k == cfg.onset_index + 1);  // shape rises after onset
    }
}

TEST_CASE("zero rate and zero noise produce silent records", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.mu = 0.0;
    cfg.white_sigma = 0.0;
    cfg.n_records = 5;
    cfg.n_noise_records = 2;
    const RecordSet recs = gen_records(cfg);
    for (const Record& r : recs.signal) {
        for (double v : r.samples) CHECK(v == 0.0);
    }
    CHECK(recs.noise.size() == 2);
    CHECK(recs.noise[0].tag == "noise");
}

TEST_CASE("white noise has the configured scale", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.mu = 0.0;
    cfg.white_sigma = 0.01;
    cfg.n_records = 1;  // gen_records requires at least one signal record
    cfg.n_noise_records = 50;
    const RecordSet recs = gen_records(cfg);
    double acc = 0.0;
    std::size_t count = 0;
    for (const Record& r : recs.noise) {
        for (double v : r.samples) {
            acc += v * v;
            ++count;
        }
    }
    const double rms = std::sqrt(acc / static_cast<double>(count));
    CHECK(rms == Catch::Approx(cfg.white_sigma).epsilon(0.01));
}

TEST_CASE("knee-shaped noise keeps white-level variance and boosts low bins", "[synthgen]") {
    Rng rng(99);
    const int n = 4096;
    const double rate = 5e7, sigma = 0.01, knee = 2e6;
    std::vector<double> shaped = detail::gen_noise(rng, n, sigma, knee, rate);
    REQUIRE(shaped.size() == static_cast<std::size_t>(n));
    double acc = 0.0;
    for (double v : shaped) acc += v * v;
    // the shaping adds the 1/f part on top of the white floor; variance grows
    CHECK(acc / n > sigma * sigma);
    // and every sample is finite
    for (double v : shaped) CHECK(std::isfinite(v));
}

TEST_CASE("scenario validation rejects inconsistent settings", "[synthgen]") {
    ScenarioConfig cfg;
    cfg.tau_rise_s = 5e-6;  // slower than the fall
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = ScenarioConfig{};
    cfg.onset_index = 20;
    cfg.jitter_samples = 50;  // jitter walks off the record start
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
    cfg = ScenarioConfig{};
    cfg.sweep_points = 4;
    CHECK_THROWS_AS(cfg.validate(), InvalidInput);
}
