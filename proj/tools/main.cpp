// mkidproc: command-line front end for the MKID analysis pipeline.
//
// One subcommand per pipeline stage, from synthetic data generation to the
// photon-count report:
//
//   simulate       write synthetic sweep / Qi(T) / IQ-scan / record files
//   resonance-fit  fit the complex S21 resonance model to a sweep CSV
//   gap-fit        fit the superconducting gap to a Qi(T) series
//   iq-calibrate   fit the IQ-plane correction chain to a distorted scan
//   trigger-align  detect pulse onsets and align records to a common index
//   offilter       build the optimum filter and estimate pulse amplitudes
//   spectrum-fit   fit the photon-number spectrum to filtered amplitudes
//
// Common flags: --config <json>, --input <path>, --output <path>,
// --seed <u64>, --verbose.  Exit codes: 0 success, 2 configuration error,
// 3 I/O error, 4 numerical failure.  Failures print a one-line JSON object
// {"error": <class>, "message": <detail>} to stderr.  Every stage finishes
// all computation and validation before writing any output, and identical
// inputs produce byte-identical outputs.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mkid/mkid.hpp"

namespace fs = std::filesystem;
using mkid::json;

namespace {

struct CliArgs {
    std::string config;
    std::string input;
    std::string output;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool verbose = false;
};

void vlog(const CliArgs& args, const std::string& msg) {
    if (args.verbose) std::cerr << msg << '\n';
}

// ---- config handling --------------------------------------------------------

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw mkid::ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw mkid::ConfigError("malformed JSON in config file: " + path);
    if (!j.is_object()) throw mkid::ConfigError("config must be a JSON object: " + path);
    return j;
}

// Unknown keys are rejected so a typo cannot silently fall back to a default.
void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (const auto& item : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
                return item.key() == k;
            }) == allowed.end()) {
            throw mkid::ConfigError(where + ": unknown config key '" + item.key() + "'");
        }
    }
}

template <class T>
T cfg_get(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw mkid::ConfigError(std::string("bad config value for '") + key + "'");
    }
}

template <class T>
T cfg_require(const json& j, const char* key) {
    if (!j.contains(key)) {
        throw mkid::ConfigError(std::string("missing required config key '") + key + "'");
    }
    return cfg_get<T>(j, key, T{});
}

std::complex<double> cfg_complex(const json& j, const char* key, std::complex<double> fallback) {
    if (!j.contains(key)) return fallback;
    const auto v = cfg_get<std::vector<double>>(j, key, {});
    if (v.size() != 2) {
        throw mkid::ConfigError(std::string("'") + key + "' must be a [re, im] pair");
    }
    return {v[0], v[1]};
}

void require_path(const std::string& p, const char* flag) {
    if (p.empty()) throw mkid::ConfigError(std::string("missing required flag ") + flag);
}

// ---- scenario <-> JSON ------------------------------------------------------

mkid::ScenarioConfig scenario_from_json(const json& j) {
    check_keys(j, {"seed",           "resonance",       "sweep_points",
                   "sweep_span_linewidths", "sweep_snr_db",
                   "delta_ev",       "alpha",           "inv_qi0",
                   "kondo_b",        "kondo_tk_k",      "temp_min_k",
                   "temp_max_k",     "temp_step_k",     "qi_frac_error",
                   "cal_ellipse",    "cal_bg_amp",      "cal_bg_phase",
                   "cal_delay_lo",   "cal_delay_hi",    "cal_center_rotation",
                   "cal_theta",      "iq_span_linewidths", "iq_points",
                   "iq_snr_db",      "tau_rise_s",      "tau_fall_s",
                   "amp_per_photon", "onset_index",     "jitter_samples",
                   "white_sigma",    "f_knee_hz",       "sample_rate_hz",
                   "record_length",  "n_records",       "n_noise_records",
                   "mu",             "spectrum_shift"},
               "simulate");
    mkid::ScenarioConfig c;
    c.seed = cfg_get<std::uint64_t>(j, "seed", c.seed);
    if (j.contains("resonance")) {
        const json& r = j.at("resonance");
        check_keys(r, {"f0_hz", "q", "qc", "phi0"}, "simulate.resonance");
        c.resonance.f0_hz = cfg_get(r, "f0_hz", c.resonance.f0_hz);
        c.resonance.q = cfg_get(r, "q", c.resonance.q);
        c.resonance.qc = cfg_get(r, "qc", c.resonance.qc);
        c.resonance.phi0 = cfg_get(r, "phi0", c.resonance.phi0);
    }
    c.sweep_points = cfg_get(j, "sweep_points", c.sweep_points);
    c.sweep_span_linewidths = cfg_get(j, "sweep_span_linewidths", c.sweep_span_linewidths);
    c.sweep_snr_db = cfg_get(j, "sweep_snr_db", c.sweep_snr_db);
    c.delta_ev = cfg_get(j, "delta_ev", c.delta_ev);
    c.alpha = cfg_get(j, "alpha", c.alpha);
    c.inv_qi0 = cfg_get(j, "inv_qi0", c.inv_qi0);
    c.kondo_b = cfg_get(j, "kondo_b", c.kondo_b);
    c.kondo_tk_k = cfg_get(j, "kondo_tk_k", c.kondo_tk_k);
    c.temp_min_k = cfg_get(j, "temp_min_k", c.temp_min_k);
    c.temp_max_k = cfg_get(j, "temp_max_k", c.temp_max_k);
    c.temp_step_k = cfg_get(j, "temp_step_k", c.temp_step_k);
    c.qi_frac_error = cfg_get(j, "qi_frac_error", c.qi_frac_error);
    if (j.contains("cal_ellipse")) {
        const json& e = j.at("cal_ellipse");
        check_keys(e, {"i0", "q0", "a_i", "a_q", "gamma"}, "simulate.cal_ellipse");
        c.cal_ellipse.i0 = cfg_get(e, "i0", c.cal_ellipse.i0);
        c.cal_ellipse.q0 = cfg_get(e, "q0", c.cal_ellipse.q0);
        c.cal_ellipse.a_i = cfg_get(e, "a_i", c.cal_ellipse.a_i);
        c.cal_ellipse.a_q = cfg_get(e, "a_q", c.cal_ellipse.a_q);
        c.cal_ellipse.gamma = cfg_get(e, "gamma", c.cal_ellipse.gamma);
    }
    c.cal_bg_amp = cfg_get(j, "cal_bg_amp", c.cal_bg_amp);
    c.cal_bg_phase = cfg_get(j, "cal_bg_phase", c.cal_bg_phase);
    c.cal_delay_lo = cfg_complex(j, "cal_delay_lo", c.cal_delay_lo);
    c.cal_delay_hi = cfg_complex(j, "cal_delay_hi", c.cal_delay_hi);
    c.cal_center_rotation = cfg_get(j, "cal_center_rotation", c.cal_center_rotation);
    c.cal_theta = cfg_get(j, "cal_theta", c.cal_theta);
    c.iq_span_linewidths = cfg_get(j, "iq_span_linewidths", c.iq_span_linewidths);
    c.iq_points = cfg_get(j, "iq_points", c.iq_points);
    c.iq_snr_db = cfg_get(j, "iq_snr_db", c.iq_snr_db);
    c.tau_rise_s = cfg_get(j, "tau_rise_s", c.tau_rise_s);
    c.tau_fall_s = cfg_get(j, "tau_fall_s", c.tau_fall_s);
    c.amp_per_photon = cfg_get(j, "amp_per_photon", c.amp_per_photon);
    c.onset_index = cfg_get(j, "onset_index", c.onset_index);
    c.jitter_samples = cfg_get(j, "jitter_samples", c.jitter_samples);
    c.white_sigma = cfg_get(j, "white_sigma", c.white_sigma);
    c.f_knee_hz = cfg_get(j, "f_knee_hz", c.f_knee_hz);
    c.sample_rate_hz = cfg_get(j, "sample_rate_hz", c.sample_rate_hz);
    c.record_length = cfg_get(j, "record_length", c.record_length);
    c.n_records = cfg_get(j, "n_records", c.n_records);
    c.n_noise_records = cfg_get(j, "n_noise_records", c.n_noise_records);
    c.mu = cfg_get(j, "mu", c.mu);
    c.spectrum_shift = cfg_get(j, "spectrum_shift", c.spectrum_shift);
    return c;
}

json scenario_to_json(const mkid::ScenarioConfig& c) {
    return json{
        {"seed", c.seed},
        {"resonance",
         {{"f0_hz", c.resonance.f0_hz},
          {"q", c.resonance.q},
          {"qc", c.resonance.qc},
          {"phi0", c.resonance.phi0}}},
        {"sweep_points", c.sweep_points},
        {"sweep_span_linewidths", c.sweep_span_linewidths},
        {"sweep_snr_db", c.sweep_snr_db},
        {"delta_ev", c.delta_ev},
        {"alpha", c.alpha},
        {"inv_qi0", c.inv_qi0},
        {"kondo_b", c.kondo_b},
        {"kondo_tk_k", c.kondo_tk_k},
        {"temp_min_k", c.temp_min_k},
        {"temp_max_k", c.temp_max_k},
        {"temp_step_k", c.temp_step_k},
        {"qi_frac_error", c.qi_frac_error},
        {"cal_ellipse",
         {{"i0", c.cal_ellipse.i0},
          {"q0", c.cal_ellipse.q0},
          {"a_i", c.cal_ellipse.a_i},
          {"a_q", c.cal_ellipse.a_q},
          {"gamma", c.cal_ellipse.gamma}}},
        {"cal_bg_amp", c.cal_bg_amp},
        {"cal_bg_phase", c.cal_bg_phase},
        {"cal_delay_lo", {c.cal_delay_lo.real(), c.cal_delay_lo.imag()}},
        {"cal_delay_hi", {c.cal_delay_hi.real(), c.cal_delay_hi.imag()}},
        {"cal_center_rotation", c.cal_center_rotation},
        {"cal_theta", c.cal_theta},
        {"iq_span_linewidths", c.iq_span_linewidths},
        {"iq_points", c.iq_points},
        {"iq_snr_db", c.iq_snr_db},
        {"tau_rise_s", c.tau_rise_s},
        {"tau_fall_s", c.tau_fall_s},
        {"amp_per_photon", c.amp_per_photon},
        {"onset_index", c.onset_index},
        {"jitter_samples", c.jitter_samples},
        {"white_sigma", c.white_sigma},
        {"f_knee_hz", c.f_knee_hz},
        {"sample_rate_hz", c.sample_rate_hz},
        {"record_length", c.record_length},
        {"n_records", c.n_records},
        {"n_noise_records", c.n_noise_records},
        {"mu", c.mu},
        {"spectrum_shift", c.spectrum_shift}};
}

// ---- shared helpers ---------------------------------------------------------

json delay_to_json(const mkid::DelayProfile& d) {
    std::vector<double> re, im;
    for (const auto& v : d.value) {
        re.push_back(v.real());
        im.push_back(v.imag());
    }
    return json{{"freq_hz", d.freq_hz}, {"re", re}, {"im", im}};
}

mkid::DelayProfile delay_from_json(const json& j) {
    mkid::DelayProfile d;
    d.freq_hz = cfg_require<std::vector<double>>(j, "freq_hz");
    const auto re = cfg_require<std::vector<double>>(j, "re");
    const auto im = cfg_require<std::vector<double>>(j, "im");
    if (re.size() != im.size() || re.size() != d.freq_hz.size()) {
        throw mkid::ConfigError("delay profile arrays disagree in length");
    }
    for (std::size_t k = 0; k < re.size(); ++k) d.value.emplace_back(re[k], im[k]);
    return d;
}

mkid::SavGolConfig savgol_from_config(const json& j) {
    mkid::SavGolConfig sg{51, 3, 2, false, 0.0};
    sg.window = cfg_get(j, "savgol_window", sg.window);
    sg.poly_order = cfg_get(j, "savgol_order", sg.poly_order);
    return sg;
}

mkid::OnsetConfig onset_from_config(const json& j) {
    mkid::OnsetConfig cfg;
    cfg.savgol = savgol_from_config(j);
    cfg.threshold = cfg_get(j, "onset_threshold", cfg.threshold);
    return cfg;
}

std::vector<mkid::Record> read_records_checked(const std::string& path, const json& cfg) {
    const double rate = cfg_get(cfg, "sample_rate_hz", 0.0);
    return mkid::read_records(path, rate);
}

void emit(const json& j) { std::cout << j.dump() << '\n'; }

// ---- subcommands ------------------------------------------------------------

void cmd_simulate(const CliArgs& args) {
    require_path(args.output, "--output");
    json cfg = load_config(args.config);
    mkid::ScenarioConfig scen;
    try {
        scen = scenario_from_json(cfg);
        if (args.seed_given) scen.seed = args.seed;
        scen.validate();
    } catch (const mkid::InvalidInput& e) {
        throw mkid::ConfigError(e.what());
    }

    vlog(args, "generating scenario with seed " + std::to_string(scen.seed));
    const mkid::ComplexSweep sweep = mkid::gen_sweep(scen);
    const mkid::QiSeries qi = mkid::gen_qi_series(scen);
    const mkid::DistortedIq iq = mkid::gen_distorted_iq(scen);
    const mkid::RecordSet records = mkid::gen_records(scen);

    const fs::path dir(args.output);
    mkid::write_sweep_csv((dir / "sweep.csv").string(), sweep);
    mkid::write_qi_series_csv((dir / "qi.csv").string(), qi, scen.alpha);
    mkid::write_trace_csv((dir / "iq_scan.csv").string(), mkid::to_trace(iq.distorted));
    mkid::write_json_file((dir / "iq_meta.json").string(),
                          json{{"band_lo_hz", iq.band_lo_hz},
                               {"band_hi_hz", iq.band_hi_hz},
                               {"asymmetry_theta", scen.cal_theta},
                               {"background_degree",
                                static_cast<int>(scen.cal_bg_amp.size()) - 1},
                               {"delay", delay_to_json(iq.delay)}});
    mkid::write_records((dir / "records.bin").string(), records.signal);
    if (!records.noise.empty()) {
        mkid::write_records((dir / "noise.bin").string(), records.noise);
    }
    mkid::write_json_file((dir / "scenario.json").string(), scenario_to_json(scen));

    emit(json{{"output", args.output},
              {"sweep_points", sweep.freq_hz.size()},
              {"qi_temperatures", qi.temperature_k.size()},
              {"records", records.signal.size()},
              {"noise_records", records.noise.size()}});
}

json background_to_json(const mkid::ScaledPoly<std::complex<double>>& p) {
    std::vector<double> re, im;
    for (const auto& c : p.coeffs) {
        re.push_back(c.real());
        im.push_back(c.imag());
    }
    return json{{"center", p.center}, {"scale", p.scale}, {"re", re}, {"im", im}};
}

void cmd_resonance_fit(const CliArgs& args) {
    require_path(args.input, "--input");
    require_path(args.output, "--output");
    const json cfg = load_config(args.config);
    check_keys(cfg, {"background_degree", "dip_threshold"}, "resonance-fit");

    mkid::ResonanceFitConfig fit_cfg;
    fit_cfg.background_degree = cfg_get(cfg, "background_degree", fit_cfg.background_degree);
    fit_cfg.dip_threshold = cfg_get(cfg, "dip_threshold", fit_cfg.dip_threshold);

    const mkid::ComplexSweep sweep = mkid::read_sweep_csv(args.input);
    vlog(args, "fitting resonance on " + std::to_string(sweep.freq_hz.size()) + " points");
    const mkid::ResonanceFit fit = mkid::fit_resonance(sweep, fit_cfg);

    const json out{{"f0_hz", fit.params.f0_hz},
                   {"q", fit.params.q},
                   {"qc", fit.params.qc},
                   {"qi", fit.qi},
                   {"phi0", fit.params.phi0},
                   {"background", background_to_json(fit.params.background)},
                   {"errors",
                    {{"f0_hz", fit.errors.f0_hz},
                     {"q", fit.errors.q},
                     {"qc", fit.errors.qc},
                     {"qi", fit.errors.qi},
                     {"phi0", fit.errors.phi0}}},
                   {"converged", fit.converged},
                   {"cost", fit.cost},
                   {"chi2_dof", fit.chi2_dof}};
    mkid::write_json_file(args.output, out);
    emit(json{{"f0_hz", fit.params.f0_hz},
              {"q", fit.params.q},
              {"qc", fit.params.qc},
              {"phi0", fit.params.phi0},
              {"chi2_dof", fit.chi2_dof}});
}

void cmd_gap_fit(const CliArgs& args) {
    require_path(args.input, "--input");
    require_path(args.output, "--output");
    const json cfg = load_config(args.config);
    check_keys(cfg, {"alpha", "use_kondo"}, "gap-fit");

    const mkid::QiSeriesFile series = mkid::read_qi_series_csv(args.input);
    const double alpha = cfg_get(cfg, "alpha", series.alpha);
    const bool use_kondo = cfg_get(cfg, "use_kondo", true);
    if (!(alpha > 0.0) || alpha > 1.0) {
        throw mkid::ConfigError("gap-fit: alpha must lie in (0, 1]");
    }

    vlog(args, "fitting gap on " + std::to_string(series.series.temperature_k.size()) +
                   " temperatures, alpha " + mkid::fmt17(alpha));
    const mkid::GapFitResult fit = mkid::fit_gap(series.series, alpha, use_kondo);

    const json out{{"delta_ev", fit.delta_ev},
                   {"tc_k", fit.tc_k},
                   {"inv_qi0", fit.inv_qi0},
                   {"kondo_b", fit.kondo_b},
                   {"kondo_tk", fit.kondo_tk_k},
                   {"errors",
                    {{"delta_ev", fit.delta_err_ev},
                     {"inv_qi0", fit.inv_qi0_err},
                     {"kondo_b", fit.kondo_b_err},
                     {"kondo_tk", fit.kondo_tk_err_k}}},
                   {"chi2_dof", fit.chi2_dof},
                   {"converged", fit.converged},
                   {"alpha", fit.alpha}};
    mkid::write_json_file(args.output, out);
    emit(json{{"delta_ev", fit.delta_ev}, {"tc_k", fit.tc_k}, {"chi2_dof", fit.chi2_dof}});
}

void cmd_iq_calibrate(const CliArgs& args) {
    require_path(args.input, "--input");
    require_path(args.output, "--output");
    const json cfg = load_config(args.config);
    check_keys(cfg,
               {"band_lo_hz", "band_hi_hz", "background_degree", "asymmetry_theta", "delay",
                "corrected_output"},
               "iq-calibrate");

    mkid::CalibrationConfig cal_cfg;
    cal_cfg.band_lo_hz = cfg_require<double>(cfg, "band_lo_hz");
    cal_cfg.band_hi_hz = cfg_require<double>(cfg, "band_hi_hz");
    cal_cfg.background_degree = cfg_get(cfg, "background_degree", cal_cfg.background_degree);
    if (cfg.contains("asymmetry_theta")) {
        cal_cfg.asymmetry_theta = cfg_get(cfg, "asymmetry_theta", 0.0);
    }
    mkid::DelayProfile delay;
    if (cfg.contains("delay")) delay = delay_from_json(cfg.at("delay"));

    const mkid::ComplexSweep scan = mkid::to_sweep(mkid::read_trace_csv(args.input));
    vlog(args, "calibrating " + std::to_string(scan.freq_hz.size()) + " scan points");
    const mkid::CalibrationChain chain = mkid::fit_calibration(scan, delay, cal_cfg);

    mkid::write_calibration_json(args.output, chain);
    if (cfg.contains("corrected_output")) {
        mkid::write_trace_csv(cfg_get<std::string>(cfg, "corrected_output", ""),
                              mkid::to_trace(chain.apply(scan)));
    }
    emit(json{{"rms_over_radius", chain.rms_over_radius},
              {"data_rms_over_radius", chain.data_rms_over_radius},
              {"radius", chain.circle.radius}});
}

void cmd_trigger_align(const CliArgs& args) {
    require_path(args.input, "--input");
    require_path(args.output, "--output");
    const json cfg = load_config(args.config);
    check_keys(cfg,
               {"savgol_window", "savgol_order", "onset_threshold", "target_index",
                "sample_rate_hz"},
               "trigger-align");

    const mkid::OnsetConfig onset_cfg = onset_from_config(cfg);
    const std::vector<mkid::Record> records = read_records_checked(args.input, cfg);

    int target = cfg_get(cfg, "target_index", -1);
    if (target < 0) {
        // Median detected onset keeps the alignment shift small on both sides.
        std::vector<double> onsets;
        for (const mkid::Record& r : records) {
            try {
                onsets.push_back(mkid::detect_onset(r.samples, onset_cfg));
            } catch (const mkid::NoOnset&) {
            }
        }
        if (onsets.empty()) {
            throw mkid::DegenerateData("trigger-align: no record has a detectable onset");
        }
        std::nth_element(onsets.begin(), onsets.begin() + onsets.size() / 2, onsets.end());
        target = static_cast<int>(onsets[onsets.size() / 2]);
    }

    vlog(args, "aligning " + std::to_string(records.size()) + " records to index " +
                   std::to_string(target));
    const mkid::AlignResult aligned = mkid::align_records(records, onset_cfg, target);
    if (aligned.aligned.empty()) {
        throw mkid::DegenerateData("trigger-align: no record could be aligned");
    }
    mkid::write_records(args.output, aligned.aligned);
    emit(json{{"aligned", aligned.aligned.size()},
              {"skipped", aligned.skipped.size()},
              {"target_index", target}});
}

void cmd_offilter(const CliArgs& args) {
    require_path(args.input, "--input");
    require_path(args.output, "--output");
    const json cfg = load_config(args.config);
    check_keys(cfg,
               {"noise", "sample_rate_hz", "model_output", "savgol_window", "savgol_order",
                "onset_threshold"},
               "offilter");

    const std::string noise_path = cfg_require<std::string>(cfg, "noise");
    const std::vector<mkid::Record> signal = read_records_checked(args.input, cfg);
    const std::vector<mkid::Record> noise = read_records_checked(noise_path, cfg);
    const mkid::OnsetConfig onset_cfg = onset_from_config(cfg);

    // Template from records that look like clean single pulses; fall back to
    // everything when the classifier leaves too few.
    mkid::ClassifyConfig classify_cfg;
    classify_cfg.onset = onset_cfg;
    std::vector<std::string> tags(signal.size());
    std::vector<mkid::Record> good;
    for (std::size_t k = 0; k < signal.size(); ++k) {
        tags[k] = mkid::classify_record(signal[k], classify_cfg);
        if (tags[k] == "good") good.push_back(signal[k]);
    }
    const std::vector<double> tmpl = mkid::average_pulse(good.size() >= 2 ? good : signal,
                                                         onset_cfg);
    const std::vector<double> psd = mkid::noise_psd(noise);
    const mkid::OfModel model = mkid::build_filter(tmpl, psd);

    mkid::OffTable table;
    for (std::size_t k = 0; k < signal.size(); ++k) {
        table.record_index.push_back(static_cast<long>(k));
        table.value.push_back(mkid::estimate_amplitude(signal[k], model));
        table.tag.push_back(tags[k]);
    }
    for (std::size_t k = 0; k < noise.size(); ++k) {
        table.record_index.push_back(static_cast<long>(signal.size() + k));
        table.value.push_back(mkid::estimate_amplitude(noise[k], model));
        table.tag.push_back("noise");
    }

    const double res = mkid::resolution(noise, model);
    mkid::write_off_csv(args.output, table);
    if (cfg.contains("model_output")) {
        mkid::write_of_model_json(cfg_get<std::string>(cfg, "model_output", ""), model);
    }
    emit(json{{"records", signal.size()},
              {"noise_records", noise.size()},
              {"template_records", good.size() >= 2 ? good.size() : signal.size()},
              {"resolution", res}});
}

void cmd_spectrum_fit(const CliArgs& args) {
    require_path(args.input, "--input");
    require_path(args.output, "--output");
    const json cfg = load_config(args.config);
    check_keys(cfg, {"sigma", "e_gamma", "fix_shift", "bin_width", "plot_output"},
               "spectrum-fit");

    const mkid::OffTable table = mkid::read_off_csv(args.input);
    std::vector<double> values;
    std::vector<double> noise_values;
    for (std::size_t k = 0; k < table.size(); ++k) {
        if (table.tag[k] == "good") values.push_back(table.value[k]);
        if (table.tag[k] == "noise") noise_values.push_back(table.value[k]);
    }
    if (values.size() < 10) {
        throw mkid::DegenerateData("spectrum-fit: need at least 10 good amplitudes");
    }

    // The detector resolution: configured, or measured as the spread of the
    // filter output on pulse-free records.
    double sigma = cfg_get(cfg, "sigma", 0.0);
    if (!(sigma > 0.0)) {
        if (noise_values.size() < 10) {
            throw mkid::ConfigError(
                "spectrum-fit: no 'sigma' configured and too few noise-tagged rows to measure it");
        }
        double mean = 0.0;
        for (double v : noise_values) mean += v;
        mean /= static_cast<double>(noise_values.size());
        double var = 0.0;
        for (double v : noise_values) var += (v - mean) * (v - mean);
        sigma = std::sqrt(var / static_cast<double>(noise_values.size() - 1));
    }
    if (!(sigma > 0.0)) {
        throw mkid::ConfigError("spectrum-fit: resolution sigma must be positive");
    }

    mkid::SpectrumConstraints cons;
    cons.fix_shift = cfg_get(cfg, "fix_shift", false);
    mkid::SpectrumModel init;
    if (cfg.contains("e_gamma")) {
        // Known per-photon spacing: hold it and seed the photon rate from the
        // variance, which keeps the fit in the identifiable basin.
        cons.fix_e_gamma = true;
        init = mkid::estimate_initial_spectrum(values, sigma,
                                               cfg_require<double>(cfg, "e_gamma"));
    } else {
        init = mkid::estimate_initial_spectrum(values, sigma);
    }

    mkid::Histogram hist;
    const double bin_width = cfg_get(cfg, "bin_width", 0.0);
    if (bin_width > 0.0) {
        const double lo = *std::min_element(values.begin(), values.end());
        const double hi = *std::max_element(values.begin(), values.end());
        std::vector<double> edges;
        for (double e = lo; e < hi + bin_width; e += bin_width) edges.push_back(e);
        hist = mkid::make_histogram(values, edges);
    } else {
        hist = mkid::make_histogram(values);
    }

    vlog(args, "fitting spectrum on " + std::to_string(values.size()) + " amplitudes in " +
                   std::to_string(hist.counts.size()) + " bins, sigma " + mkid::fmt17(sigma));
    const mkid::SpectrumFit fit = mkid::fit_spectrum(hist, init, cons);

    const json out{{"mu", fit.model.mu},
                   {"mu_err", fit.mu_err},
                   {"a", fit.model.amplitude},
                   {"shift", fit.model.shift},
                   {"e_gamma", fit.model.e_gamma},
                   {"sigma_fixed", fit.model.sigma},
                   {"chi2_dof", fit.chi2_dof},
                   {"n_bins", hist.counts.size()}};

    std::string plot_path = cfg_get<std::string>(cfg, "plot_output", "");
    if (plot_path.empty()) {
        fs::path p(args.output);
        p.replace_extension(".csv");
        plot_path = p.string();
    }

    mkid::write_json_file(args.output, out);
    {
        std::ofstream f(plot_path);
        if (!f) throw mkid::IoError("cannot open for writing: " + plot_path);
        f << "bin_center,counts,model\n";
        for (std::size_t k = 0; k + 1 < hist.bin_edges.size(); ++k) {
            const double lo = hist.bin_edges[k], hi = hist.bin_edges[k + 1];
            f << mkid::fmt17(0.5 * (lo + hi)) << ',' << mkid::fmt17(hist.counts[k]) << ','
              << mkid::fmt17(mkid::model_bin_content(lo, hi, fit.model)) << '\n';
        }
        f.flush();
        if (!f) throw mkid::IoError("write failed: " + plot_path);
    }
    emit(out);
}

void report_error(const char* kind, const std::string& message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MKID single-photon analysis pipeline"};
    app.require_subcommand(1);

    CliArgs args;
    void (*stage)(const CliArgs&) = nullptr;

    const struct {
        const char* name;
        const char* help;
        void (*fn)(const CliArgs&);
        bool needs_input;
    } stages[] = {
        {"simulate", "generate synthetic sweep, Qi(T), IQ scan and record files", cmd_simulate,
         false},
        {"resonance-fit", "fit the complex resonance model to a sweep CSV", cmd_resonance_fit,
         true},
        {"gap-fit", "fit the superconducting gap to a Qi(T) series", cmd_gap_fit, true},
        {"iq-calibrate", "fit the IQ-plane correction chain to a distorted scan",
         cmd_iq_calibrate, true},
        {"trigger-align", "detect pulse onsets and align records", cmd_trigger_align, true},
        {"offilter", "build the optimum filter and estimate amplitudes", cmd_offilter, true},
        {"spectrum-fit", "fit the photon-number spectrum to filtered amplitudes",
         cmd_spectrum_fit, true},
    };

    for (const auto& s : stages) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        sub->add_option("--config", args.config, "JSON config file");
        if (s.needs_input) sub->add_option("--input", args.input, "input data file");
        sub->add_option("--output", args.output,
                        s.needs_input ? "output file" : "output directory");
        CLI::Option* seed_opt = sub->add_option("--seed", args.seed, "override the RNG seed");
        sub->add_flag("--verbose", args.verbose, "log progress to stderr");
        sub->callback([&args, &stage, seed_opt, fn = s.fn]() {
            args.seed_given = seed_opt->count() > 0;
            stage = fn;
        });
    }

    try {
        app.parse(argc, argv);
        stage(args);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("ConfigError", e.what());
        return 2;
    } catch (const mkid::ConfigError& e) {
        report_error("ConfigError", e.what());
        return 2;
    } catch (const mkid::IoError& e) {
        report_error("IoError", e.what());
        return 3;
    } catch (const mkid::Error& e) {
        report_error("NumericalError", e.what());
        return 4;
    } catch (const std::exception& e) {
        report_error("InternalError", e.what());
        return 4;
    }
}
