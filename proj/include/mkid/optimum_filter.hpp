#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "mkid/dft.hpp"
#include "mkid/errors.hpp"
#include "mkid/pulse_dsp.hpp"

// DFT-based optimum (matched) filter: noise spectrum estimation, average-pulse
// template, transfer function, and the filtered-amplitude estimator used to
// measure pulse energies.
//
// Conventions, fixed here and relied on by the tests:
//  - noise_psd is one-sided, length N/2 + 1.  Bin k holds
//    c_k * mean|X_k|^2 / N with c = 1 at DC and Nyquist and 2 elsewhere, so
//    for white noise of per-sample variance sigma^2 the bins sum to N sigma^2.
//  - transfer is full length N with H_k = conj(T_k) / J_k, J the two-sided
//    per-bin noise power, and H_0 = 0: baseline subtraction leaves residual
//    DC that carries no pulse information.
//  - normalization is chosen so that the estimator applied to the bare
//    template returns exactly 1; absolute scale is deferred to the spectrum
//    fit, which measures the per-photon amplitude as a free parameter.

namespace mkid {

struct OfModel {
    std::vector<double> template_samples;  // average pulse, peak-normalized
    std::vector<double> noise_psd;         // one-sided power per bin, N/2 + 1
    std::vector<cplx> transfer;            // length N, DC weight zero
    double normalization = 0.0;

    std::size_t size() const { return template_samples.size(); }
};

namespace detail {

// One-sided folding weight: interior bins absorb their mirror image.
inline double onesided_weight(std::size_t k, std::size_t n) {
    if (k == 0) return 1.0;
    if (n % 2 == 0 && k == n / 2) return 1.0;
    return 2.0;
}

inline void require_equal_lengths(const std::vector<Record>& records, const char* who) {
    if (records.empty() || records.front().samples.empty()) {
        throw InvalidInput(std::string(who) + ": empty input");
    }
    const std::size_t n = records.front().samples.size();
    for (const Record& r : records) {
        if (r.samples.size() != n) {
            throw InvalidInput(std::string(who) + ": records differ in length");
        }
    }
}

}  // namespace detail

// Per-sample mean of aligned records, baseline-subtracted (median of the
// pre-onset samples) and normalized so the peak sample is exactly 1.  The
// onset is taken from the records' trigger_index when they agree on one
// (align_records guarantees that) and detected on the averaged trace
// otherwise.
inline std::vector<double> average_pulse(const std::vector<Record>& aligned,
                                         const OnsetConfig& onset_cfg = {}) {
    detail::require_equal_lengths(aligned, "average_pulse");
    if (aligned.size() < 2) {
        throw InvalidInput("average_pulse: need at least 2 records");
    }
    const std::size_t n = aligned.front().samples.size();

    std::vector<double> mean(n, 0.0);
    for (const Record& r : aligned) {
        for (std::size_t k = 0; k < n; ++k) mean[k] += r.samples[k];
    }
    for (double& v : mean) v /= static_cast<double>(aligned.size());

    int onset = aligned.front().trigger_index;
    for (const Record& r : aligned) {
        if (r.trigger_index != onset) onset = -1;
    }
    if (onset < 1) onset = detect_onset(mean, onset_cfg);
    if (onset < 1 || onset >= static_cast<int>(n)) {
        throw InvalidInput("average_pulse: onset leaves no baseline window");
    }

    std::vector<double> pre(mean.begin(), mean.begin() + onset);
    const double baseline = detail::median_inplace(pre);
    for (double& v : mean) v -= baseline;

    std::size_t peak = 0;
    for (std::size_t k = 1; k < n; ++k) {
        if (std::abs(mean[k]) > std::abs(mean[peak])) peak = k;
    }
    if (mean[peak] == 0.0) {
        throw DegenerateData("average_pulse: averaged trace is identically zero");
    }
    const double scale = mean[peak];
    for (double& v : mean) v /= scale;
    return mean;
}

// Mean over records of the one-sided per-bin power (see header comment for
// the scaling).  No window, no detrending: pure-DC records put all of their
// power in bin 0.
inline std::vector<double> noise_psd(const std::vector<Record>& noise_records) {
    detail::require_equal_lengths(noise_records, "noise_psd");
    if (noise_records.size() < 8) {
        throw InvalidInput("noise_psd: need at least 8 pulse-free records");
    }
    const std::size_t n = noise_records.front().samples.size();
    std::vector<double> psd(n / 2 + 1, 0.0);
    for (const Record& r : noise_records) {
        const std::vector<cplx> x = dft(r.samples);
        for (std::size_t k = 0; k < psd.size(); ++k) psd[k] += std::norm(x[k]);
    }
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(noise_records.size()));
    for (std::size_t k = 0; k < psd.size(); ++k) {
        psd[k] *= detail::onesided_weight(k, n) * scale;
        if (!std::isfinite(psd[k])) {
            throw InvalidInput("noise_psd: non-finite power");
        }
    }
    return psd;
}

// H_k = conj(T_k) / J_k with the DC weight zeroed and the normalization set
// so that the estimator returns exactly 1 on the template itself.
inline OfModel build_filter(const std::vector<double>& template_samples,
                            const std::vector<double>& psd) {
    const std::size_t n = template_samples.size();
    if (n < 2) throw InvalidInput("build_filter: template too short");
    if (psd.size() != n / 2 + 1) {
        throw InvalidInput("build_filter: PSD length must be N/2 + 1");
    }
    for (std::size_t k = 1; k < psd.size(); ++k) {
        if (!(psd[k] > 0.0) || !std::isfinite(psd[k])) {
            throw InvalidInput("build_filter: noise power must be positive");
        }
    }

    const std::vector<cplx> t = dft(template_samples);
    OfModel model;
    model.template_samples = template_samples;
    model.noise_psd = psd;
    model.transfer.assign(n, cplx{0.0, 0.0});
    cplx unit{0.0, 0.0};
    for (std::size_t k = 1; k < n; ++k) {
        const std::size_t kk = std::min(k, n - k);
        // two-sided per-bin power: undo the one-sided folding factor
        const double j2 = psd[kk] / detail::onesided_weight(kk, n);
        model.transfer[k] = std::conj(t[k]) / j2;
        unit += model.transfer[k] * t[k];
    }
    if (!(unit.real() > 0.0)) {
        throw DegenerateData("build_filter: template has no power outside DC");
    }
    model.normalization = 1.0 / unit.real();
    return model;
}

// Amplitude estimate: normalization * Re sum_k H_k S_k with S the DFT of the
// mean-subtracted record.  The mean subtraction only moves the (zero-weight)
// DC bin; it is kept so filtered traces are baseline-free.
inline double estimate_amplitude(const Record& record, const OfModel& model) {
    const std::size_t n = model.size();
    if (record.samples.size() != n) {
        throw InvalidInput("estimate_amplitude: record length does not match model");
    }
    double mean = 0.0;
    for (const double v : record.samples) mean += v;
    mean /= static_cast<double>(n);
    std::vector<double> x(n);
    for (std::size_t k = 0; k < n; ++k) x[k] = record.samples[k] - mean;

    const std::vector<cplx> s = dft(x);
    cplx acc{0.0, 0.0};
    for (std::size_t k = 1; k < n; ++k) acc += model.transfer[k] * s[k];
    return model.normalization * acc.real();
}

// Time-domain filtered signal, scaled so the sample at lag 0 equals the
// amplitude estimate; for an aligned pulse the output is a cusp with its
// global extremum at lag 0.
inline std::vector<double> filtered_trace(const Record& record, const OfModel& model) {
    const std::size_t n = model.size();
    if (record.samples.size() != n) {
        throw InvalidInput("filtered_trace: record length does not match model");
    }
    double mean = 0.0;
    for (const double v : record.samples) mean += v;
    mean /= static_cast<double>(n);
    std::vector<double> x(n);
    for (std::size_t k = 0; k < n; ++k) x[k] = record.samples[k] - mean;

    std::vector<cplx> s = dft(x);
    for (std::size_t k = 0; k < n; ++k) s[k] *= model.transfer[k];
    const std::vector<cplx> y = idft(s);
    std::vector<double> out(n);
    const double scale = model.normalization * static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = scale * y[k].real();
    return out;
}

// Detector resolution: RMS of the amplitude estimator over pulse-free records.
inline double resolution(const std::vector<Record>& noise_records, const OfModel& model) {
    if (noise_records.size() < 8) {
        throw InvalidInput("resolution: need at least 8 pulse-free records");
    }
    double acc = 0.0;
    for (const Record& r : noise_records) {
        const double a = estimate_amplitude(r, model);
        acc += a * a;
    }
    return std::sqrt(acc / static_cast<double>(noise_records.size()));
}

}  // namespace mkid
