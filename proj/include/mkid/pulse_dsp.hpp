#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mkid/errors.hpp"

// Time-domain processing of acquisition records: smoothing, Savitzky-Golay
// polynomial filtering, second-derivative onset detection, record alignment
// and classification.

namespace mkid {

struct Record {
    std::vector<double> samples;   // one channel, typically extracted phase
    double sample_rate_hz = 0.0;
    int trigger_index = -1;        // detected/assigned onset sample, -1 if unset
    int shift = 0;                 // alignment shift that was applied
    std::string tag = "good";      // good | empty | multiple | bad
};

// ---- moving average ---------------------------------------------------------

// Centered mean with an odd window; edge outputs use symmetrically shrunk
// windows (radius min(h, i, n-1-i)), so a constant input is preserved exactly.
inline std::vector<double> moving_average(const std::vector<double>& x, int window) {
    if (window < 1 || window % 2 == 0) {
        throw InvalidInput("moving_average: window must be odd and positive");
    }
    const int n = static_cast<int>(x.size());
    if (n == 0) return {};
    const int h = window / 2;
    // prefix[i] = sum of x[0..i)
    std::vector<double> prefix(static_cast<std::size_t>(n) + 1, 0.0);
    for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i];
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int r = std::min({h, i, n - 1 - i});
        out[i] = (prefix[i + r + 1] - prefix[i - r]) / (2 * r + 1);
    }
    return out;
}

// ---- Savitzky-Golay ---------------------------------------------------------

struct SavGolConfig {
    int window = 51;        // odd, > poly_order
    int poly_order = 3;
    int deriv_order = 0;    // <= poly_order
    // When true, derivative outputs are per second instead of per sample.
    bool scale_by_rate = false;
    double sample_rate_hz = 0.0;

    void validate() const {
        if (window < 3 || window % 2 == 0) {
            throw InvalidInput("SavGolConfig: window must be odd and >= 3");
        }
        if (poly_order < 0 || poly_order >= window) {
            throw InvalidInput("SavGolConfig: poly_order must be in [0, window)");
        }
        if (deriv_order < 0 || deriv_order > poly_order) {
            throw InvalidInput("SavGolConfig: deriv_order must be in [0, poly_order]");
        }
        if (scale_by_rate && !(sample_rate_hz > 0.0)) {
            throw InvalidInput("SavGolConfig: scale_by_rate needs a sample rate");
        }
    }
};

namespace detail {

// Weights evaluating the deriv-th derivative of the window's least-squares
// polynomial at offset d from the window center (d in samples).  Offsets are
// normalized to [-1, 1] before solving to keep the normal equations tame.
inline std::vector<double> savgol_weights_at(const SavGolConfig& cfg, double d) {
    const int h = cfg.window / 2;
    const int m = cfg.poly_order + 1;
    const double scale = static_cast<double>(h);
    Eigen::MatrixXd a(cfg.window, m);
    for (int i = -h; i <= h; ++i) {
        double t = 1.0;
        const double u = static_cast<double>(i) / scale;
        for (int j = 0; j < m; ++j) {
            a(i + h, j) = t;
            t *= u;
        }
    }
    Eigen::VectorXd v = Eigen::VectorXd::Zero(m);
    const int r = cfg.deriv_order;
    const double ud = d / scale;
    for (int j = r; j < m; ++j) {
        double fall = 1.0;  // j! / (j-r)!
        for (int k = 0; k < r; ++k) fall *= static_cast<double>(j - k);
        v[j] = fall * std::pow(ud, j - r);
    }
    const Eigen::MatrixXd ata = a.transpose() * a;
    const Eigen::VectorXd z = ata.ldlt().solve(v);
    Eigen::VectorXd w = a * z;
    // Undo the offset normalization: d^r/dx^r picks up scale^-r.
    w *= std::pow(scale, -static_cast<double>(r));
    return {w.data(), w.data() + w.size()};
}

}  // namespace detail

// Convolution weights for the window center (the classical published tables).
inline std::vector<double> savgol_coefficients(const SavGolConfig& cfg) {
    cfg.validate();
    auto w = detail::savgol_weights_at(cfg, 0.0);
    if (cfg.scale_by_rate && cfg.deriv_order > 0) {
        const double s = std::pow(cfg.sample_rate_hz, cfg.deriv_order);
        for (auto& c : w) c *= s;
    }
    return w;
}

// Filter a trace.  Interior samples use the centered weights; near the edges
// the window is anchored at the trace boundary and the fitted polynomial is
// evaluated off-center, so polynomial inputs are reproduced exactly even at
// the first and last samples.
inline std::vector<double> savgol_filter(const std::vector<double>& x, const SavGolConfig& cfg) {
    cfg.validate();
    const int n = static_cast<int>(x.size());
    const int w = cfg.window;
    const int h = w / 2;
    if (n < w) {
        throw InvalidInput("savgol_filter: trace shorter than the window");
    }
    const double rate_scale = (cfg.scale_by_rate && cfg.deriv_order > 0)
                                  ? std::pow(cfg.sample_rate_hz, cfg.deriv_order)
                                  : 1.0;
    std::vector<double> out(static_cast<std::size_t>(n));

    const auto center = detail::savgol_weights_at(cfg, 0.0);
    for (int i = h; i < n - h; ++i) {
        double acc = 0.0;
        for (int j = 0; j < w; ++j) acc += center[j] * x[i - h + j];
        out[i] = acc * rate_scale;
    }
    for (int i = 0; i < h && i < n; ++i) {
        // left edge: window [0, w), evaluate at offset i - h
        const auto we = detail::savgol_weights_at(cfg, static_cast<double>(i - h));
        double acc = 0.0;
        for (int j = 0; j < w; ++j) acc += we[j] * x[j];
        out[i] = acc * rate_scale;
        // right edge mirrors the layout: window [n-w, n), offset (i) from its center
        const auto wr = detail::savgol_weights_at(cfg, static_cast<double>(h - i));
        acc = 0.0;
        for (int j = 0; j < w; ++j) acc += wr[j] * x[n - w + j];
        out[n - 1 - i] = acc * rate_scale;
    }
    return out;
}

// ---- onset detection and alignment -------------------------------------------

struct OnsetConfig {
    SavGolConfig savgol{51, 3, 2, false, 0.0};
    double threshold = 5.0;  // in units of the MAD-derived noise scale
};

namespace detail {

inline double median_inplace(std::vector<double>& v) {
    if (v.empty()) throw InvalidInput("median of empty range");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) {
        std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
        m = 0.5 * (m + v[mid - 1]);
    }
    return m;
}

inline double mad_scale(const std::vector<double>& v) {
    std::vector<double> tmp = v;
    const double med = median_inplace(tmp);
    for (auto& t : tmp) t = std::abs(t - med);
    // 1.4826 makes the MAD consistent with a Gaussian sigma.
    return 1.4826 * median_inplace(tmp);
}

// Above-threshold regions of |d2|, restricted to the edge-free interior.
inline std::vector<std::pair<int, int>> curvature_regions(const std::vector<double>& d2,
                                                          int h, double cut) {
    std::vector<std::pair<int, int>> regions;
    const int n = static_cast<int>(d2.size());
    int start = -1;
    for (int i = h; i < n - h; ++i) {
        const bool hot = std::abs(d2[i]) > cut;
        if (hot && start < 0) start = i;
        if (!hot && start >= 0) {
            regions.emplace_back(start, i);
            start = -1;
        }
    }
    if (start >= 0) regions.emplace_back(start, n - h);
    return regions;
}

}  // namespace detail

// First sample where the smoothed second derivative leaves the noise band.
// The scan skips the half-window edges, so shifting a pulse inside the
// interior shifts the reported onset by exactly the same amount.
inline int detect_onset(const std::vector<double>& x, const OnsetConfig& cfg = {}) {
    const auto d2 = savgol_filter(x, [&] {
        SavGolConfig c = cfg.savgol;
        c.deriv_order = 2;
        c.scale_by_rate = false;
        return c;
    }());
    const double scale = detail::mad_scale(d2);
    const double cut = cfg.threshold * (scale > 0.0 ? scale : 1e-300);
    const int h = cfg.savgol.window / 2;
    const int n = static_cast<int>(d2.size());
    for (int i = h; i < n - h; ++i) {
        if (std::abs(d2[i]) > cut) return i;
    }
    throw NoOnset("detect_onset: no threshold crossing");
}

struct AlignResult {
    std::vector<Record> aligned;
    std::vector<std::size_t> skipped;  // input indices with no detectable onset
};

// Shift each record by an integer number of samples so its detected onset
// lands on target_index.  Samples shifted in are filled with the record's
// pre-onset baseline median.  Records with no onset are skipped and listed.
inline AlignResult align_records(const std::vector<Record>& records,
                                 const OnsetConfig& cfg, int target_index) {
    AlignResult out;
    out.aligned.reserve(records.size());
    for (std::size_t ri = 0; ri < records.size(); ++ri) {
        const Record& rec = records[ri];
        int onset = 0;
        try {
            onset = detect_onset(rec.samples, cfg);
        } catch (const NoOnset&) {
            out.skipped.push_back(ri);
            continue;
        }
        const int n = static_cast<int>(rec.samples.size());
        const int shift = target_index - onset;
        std::vector<double> pre(rec.samples.begin(),
                                rec.samples.begin() + std::max(onset, 1));
        const double fill = detail::median_inplace(pre);
        Record moved = rec;
        for (int i = 0; i < n; ++i) {
            const int src = i - shift;
            moved.samples[i] = (src >= 0 && src < n) ? rec.samples[src] : fill;
        }
        moved.trigger_index = target_index;
        moved.shift = shift;
        out.aligned.push_back(std::move(moved));
    }
    return out;
}

// ---- classification ----------------------------------------------------------

struct ClassifyConfig {
    OnsetConfig onset;
    double adc_full_scale = 5.0;  // |sample| at or beyond this is saturation
    // Above-threshold curvature regions closer than this collapse into one
    // pulse (a single pulse produces a bipolar pair of lobes); 0 picks the
    // default of three filter windows.
    int merge_gap = 0;
};

// empty: no curvature excursion; good: one pulse; multiple: more than one;
// bad: saturated or non-finite samples.
inline std::string classify_record(const Record& rec, const ClassifyConfig& cfg = {}) {
    for (const double s : rec.samples) {
        if (!std::isfinite(s) || std::abs(s) >= cfg.adc_full_scale) return "bad";
    }
    const auto d2 = savgol_filter(rec.samples, [&] {
        SavGolConfig c = cfg.onset.savgol;
        c.deriv_order = 2;
        c.scale_by_rate = false;
        return c;
    }());
    const double scale = detail::mad_scale(d2);
    const double cut = cfg.onset.threshold * (scale > 0.0 ? scale : 1e-300);
    auto regions = detail::curvature_regions(d2, cfg.onset.savgol.window / 2, cut);
    if (regions.empty()) return "empty";
    const int gap = cfg.merge_gap > 0 ? cfg.merge_gap : 3 * cfg.onset.savgol.window;
    int pulses = 1;
    for (std::size_t i = 1; i < regions.size(); ++i) {
        if (regions[i].first - regions[i - 1].second >= gap) ++pulses;
    }
    return pulses > 1 ? "multiple" : "good";
}

}  // namespace mkid
