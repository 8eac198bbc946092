#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mkid/errors.hpp"
#include "mkid/gap_fit.hpp"
#include "mkid/iq_cal.hpp"
#include "mkid/optimum_filter.hpp"
#include "mkid/pulse_dsp.hpp"
#include "mkid/resonance.hpp"

// File formats of the pipeline artifacts.
//
//  - frequency sweeps:     CSV `freq_hz,re,im`
//  - Qi(T) series:         CSV `temperature_k,inv_qi,inv_qi_err` plus a JSON
//                          sidecar `{resonator_id, f0_hz, alpha}` at
//                          <path>.json
//  - pulse records:        one file: a single-line JSON header
//                          `{sample_rate_hz, record_length, n_records,
//                          channels, trigger_index}` terminated by '\n',
//                          followed by the samples as little-endian 64-bit
//                          floats, records concatenated channel-major.  A
//                          path ending in .csv selects the text fallback
//                          `record_index,sample_index,value` instead (which
//                          carries no sample rate: the reader takes it as an
//                          argument).  Tags are not persisted; aligned
//                          records share one trigger_index in the header.
//  - filtered amplitudes:  CSV `record_index,off_value,tag`
//  - IQ traces:            CSV `axis,i,q`
//  - calibration chain,
//    filter model:         JSON documents
//
// Text numbers are printed with 17 significant digits, so rerunning a stage
// on identical inputs reproduces its outputs byte for byte.  Readers throw
// IoError with the offending path (and line, for CSV) in the message.

namespace mkid {

using nlohmann::json;

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream f(path, mode);
    if (!f) throw IoError("cannot open for reading: " + path);
    return f;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream f(path, mode);
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

inline void finish_write(std::ofstream& f, const std::string& path) {
    f.flush();
    if (!f) throw IoError("write failed: " + path);
}

// Splits a CSV line on commas; no quoting (none of the formats needs it).
inline std::vector<std::string> csv_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

inline double parse_double(const std::string& s, const std::string& path, std::size_t lineno) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') {
        throw IoError(path + ":" + std::to_string(lineno) + ": not a number: '" + s + "'");
    }
    return v;
}

inline long parse_long(const std::string& s, const std::string& path, std::size_t lineno) {
    char* end = nullptr;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0') {
        throw IoError(path + ":" + std::to_string(lineno) + ": not an integer: '" + s + "'");
    }
    return v;
}

// Strips a trailing '\r' so CRLF files parse identically.
inline bool next_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

inline void expect_header(std::istream& in, const std::string& want, const std::string& path) {
    std::string line;
    if (!next_line(in, line) || line != want) {
        throw IoError(path + ": expected header '" + want + "'");
    }
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline json parse_json(const std::string& text, const std::string& path) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw IoError(path + ": malformed JSON");
    return j;
}

template <class T>
inline T json_get(const json& j, const char* key, const std::string& path) {
    if (!j.contains(key)) throw IoError(path + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw IoError(path + ": bad value for key '" + key + "'");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generic JSON files

inline json read_json_file(const std::string& path) {
    std::ifstream f = detail::open_in(path);
    std::stringstream ss;
    ss << f.rdbuf();
    return detail::parse_json(ss.str(), path);
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream f = detail::open_out(path);
    f << j.dump(2) << '\n';
    detail::finish_write(f, path);
}

// ---------------------------------------------------------------------------
// frequency sweeps

inline void write_sweep_csv(const std::string& path, const ComplexSweep& sweep) {
    sweep.validate();
    std::ofstream f = detail::open_out(path);
    f << "freq_hz,re,im\n";
    for (std::size_t k = 0; k < sweep.freq_hz.size(); ++k) {
        f << fmt17(sweep.freq_hz[k]) << ',' << fmt17(sweep.s21[k].real()) << ','
          << fmt17(sweep.s21[k].imag()) << '\n';
    }
    detail::finish_write(f, path);
}

inline ComplexSweep read_sweep_csv(const std::string& path) {
    std::ifstream f = detail::open_in(path);
    detail::expect_header(f, "freq_hz,re,im", path);
    ComplexSweep out;
    std::string line;
    std::size_t lineno = 1;
    while (detail::next_line(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = detail::csv_fields(line);
        if (fields.size() != 3) {
            throw IoError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        }
        out.freq_hz.push_back(detail::parse_double(fields[0], path, lineno));
        out.s21.emplace_back(detail::parse_double(fields[1], path, lineno),
                             detail::parse_double(fields[2], path, lineno));
    }
    try {
        out.validate();
    } catch (const Error& e) {
        throw IoError(path + ": " + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Qi(T) series (CSV + JSON sidecar at <path>.json)

inline void write_qi_series_csv(const std::string& path, const QiSeries& series, double alpha) {
    series.validate();
    std::ofstream f = detail::open_out(path);
    f << "temperature_k,inv_qi,inv_qi_err\n";
    for (std::size_t k = 0; k < series.temperature_k.size(); ++k) {
        f << fmt17(series.temperature_k[k]) << ',' << fmt17(series.inv_qi[k]) << ','
          << fmt17(series.inv_qi_err[k]) << '\n';
    }
    detail::finish_write(f, path);
    write_json_file(path + ".json", json{{"resonator_id", series.resonator_id},
                                         {"f0_hz", series.f0_hz},
                                         {"alpha", alpha}});
}

struct QiSeriesFile {
    QiSeries series;
    double alpha = 0.0;
};

inline QiSeriesFile read_qi_series_csv(const std::string& path) {
    std::ifstream f = detail::open_in(path);
    detail::expect_header(f, "temperature_k,inv_qi,inv_qi_err", path);
    QiSeriesFile out;
    std::string line;
    std::size_t lineno = 1;
    while (detail::next_line(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = detail::csv_fields(line);
        if (fields.size() != 3) {
            throw IoError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        }
        out.series.temperature_k.push_back(detail::parse_double(fields[0], path, lineno));
        out.series.inv_qi.push_back(detail::parse_double(fields[1], path, lineno));
        out.series.inv_qi_err.push_back(detail::parse_double(fields[2], path, lineno));
    }
    const std::string sidecar = path + ".json";
    const json meta = read_json_file(sidecar);
    out.series.resonator_id = detail::json_get<std::string>(meta, "resonator_id", sidecar);
    out.series.f0_hz = detail::json_get<double>(meta, "f0_hz", sidecar);
    out.alpha = detail::json_get<double>(meta, "alpha", sidecar);
    try {
        out.series.validate();
    } catch (const Error& e) {
        throw IoError(path + ": " + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// pulse records

namespace detail {

// Little-endian float64, the native layout on every supported target; a
// byte-order probe guards the assumption instead of silently corrupting.
inline void require_little_endian() {
    const std::uint32_t probe = 1;
    unsigned char bytes[4];
    std::memcpy(bytes, &probe, 4);
    if (bytes[0] != 1) throw IoError("record payload requires a little-endian host");
}

}  // namespace detail

inline void write_records(const std::string& path, const std::vector<Record>& records) {
    if (records.empty()) throw InvalidInput("write_records: no records");
    const std::size_t len = records.front().samples.size();
    double rate = records.front().sample_rate_hz;
    long trigger = records.front().trigger_index;
    for (const Record& r : records) {
        if (r.samples.size() != len || r.sample_rate_hz != rate) {
            throw InvalidInput("write_records: records must share length and rate");
        }
        if (r.trigger_index != trigger) trigger = -1;  // heterogeneous: drop
    }
    if (detail::ends_with(path, ".csv")) {
        std::ofstream f = detail::open_out(path);
        f << "record_index,sample_index,value\n";
        for (std::size_t r = 0; r < records.size(); ++r) {
            for (std::size_t k = 0; k < len; ++k) {
                f << r << ',' << k << ',' << fmt17(records[r].samples[k]) << '\n';
            }
        }
        detail::finish_write(f, path);
        return;
    }
    detail::require_little_endian();
    std::ofstream f = detail::open_out(path, std::ios::out | std::ios::binary);
    const json header{{"sample_rate_hz", rate},
                      {"record_length", len},
                      {"n_records", records.size()},
                      {"channels", 1},
                      {"trigger_index", trigger}};
    f << header.dump() << '\n';
    for (const Record& r : records) {
        f.write(reinterpret_cast<const char*>(r.samples.data()),
                static_cast<std::streamsize>(len * sizeof(double)));
    }
    detail::finish_write(f, path);
}

inline std::vector<Record> read_records(const std::string& path, double csv_sample_rate_hz = 0.0) {
    if (detail::ends_with(path, ".csv")) {
        if (!(csv_sample_rate_hz > 0.0)) {
            throw InvalidInput("read_records: CSV records need a sample rate");
        }
        std::ifstream f = detail::open_in(path);
        detail::expect_header(f, "record_index,sample_index,value", path);
        std::vector<Record> out;
        std::string line;
        std::size_t lineno = 1;
        long prev_rec = -1;
        while (detail::next_line(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto fields = detail::csv_fields(line);
            if (fields.size() != 3) {
                throw IoError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
            }
            const long rec = detail::parse_long(fields[0], path, lineno);
            const long idx = detail::parse_long(fields[1], path, lineno);
            const double v = detail::parse_double(fields[2], path, lineno);
            if (rec == prev_rec + 1) {
                out.emplace_back();
                out.back().sample_rate_hz = csv_sample_rate_hz;
                prev_rec = rec;
            } else if (rec != prev_rec) {
                throw IoError(path + ":" + std::to_string(lineno) +
                              ": record indices must be contiguous and ascending");
            }
            if (idx != static_cast<long>(out.back().samples.size())) {
                throw IoError(path + ":" + std::to_string(lineno) +
                              ": sample indices must count up from 0 per record");
            }
            out.back().samples.push_back(v);
        }
        if (out.empty()) throw IoError(path + ": no records");
        return out;
    }

    detail::require_little_endian();
    std::ifstream f = detail::open_in(path, std::ios::in | std::ios::binary);
    std::string header_line;
    if (!std::getline(f, header_line)) throw IoError(path + ": missing record header");
    const json header = detail::parse_json(header_line, path);
    const double rate = detail::json_get<double>(header, "sample_rate_hz", path);
    const std::size_t len = detail::json_get<std::size_t>(header, "record_length", path);
    const std::size_t n = detail::json_get<std::size_t>(header, "n_records", path);
    const int channels = detail::json_get<int>(header, "channels", path);
    const long trigger = header.contains("trigger_index")
                             ? detail::json_get<long>(header, "trigger_index", path)
                             : -1;
    if (channels != 1) throw IoError(path + ": only single-channel records are supported");
    if (!(rate > 0.0) || len == 0 || n == 0) throw IoError(path + ": bad record header");

    std::vector<Record> out(n);
    for (Record& r : out) {
        r.sample_rate_hz = rate;
        r.trigger_index = static_cast<int>(trigger);
        r.samples.resize(len);
        f.read(reinterpret_cast<char*>(r.samples.data()),
               static_cast<std::streamsize>(len * sizeof(double)));
        if (f.gcount() != static_cast<std::streamsize>(len * sizeof(double))) {
            throw IoError(path + ": truncated record payload");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// filtered amplitudes

struct OffTable {
    std::vector<long> record_index;
    std::vector<double> value;
    std::vector<std::string> tag;

    std::size_t size() const { return value.size(); }
};

inline void write_off_csv(const std::string& path, const OffTable& table) {
    if (table.record_index.size() != table.value.size() || table.tag.size() != table.value.size()) {
        throw InvalidInput("write_off_csv: column size mismatch");
    }
    std::ofstream f = detail::open_out(path);
    f << "record_index,off_value,tag\n";
    for (std::size_t k = 0; k < table.value.size(); ++k) {
        f << table.record_index[k] << ',' << fmt17(table.value[k]) << ',' << table.tag[k] << '\n';
    }
    detail::finish_write(f, path);
}

inline OffTable read_off_csv(const std::string& path) {
    std::ifstream f = detail::open_in(path);
    detail::expect_header(f, "record_index,off_value,tag", path);
    OffTable out;
    std::string line;
    std::size_t lineno = 1;
    while (detail::next_line(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = detail::csv_fields(line);
        if (fields.size() != 3) {
            throw IoError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        }
        out.record_index.push_back(detail::parse_long(fields[0], path, lineno));
        out.value.push_back(detail::parse_double(fields[1], path, lineno));
        out.tag.push_back(fields[2]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// IQ traces

inline void write_trace_csv(const std::string& path, const IqTrace& trace) {
    if (trace.axis.size() != trace.i.size() || trace.i.size() != trace.q.size()) {
        throw InvalidInput("write_trace_csv: column size mismatch");
    }
    std::ofstream f = detail::open_out(path);
    f << "axis,i,q\n";
    for (std::size_t k = 0; k < trace.axis.size(); ++k) {
        f << fmt17(trace.axis[k]) << ',' << fmt17(trace.i[k]) << ',' << fmt17(trace.q[k]) << '\n';
    }
    detail::finish_write(f, path);
}

inline IqTrace read_trace_csv(const std::string& path) {
    std::ifstream f = detail::open_in(path);
    detail::expect_header(f, "axis,i,q", path);
    IqTrace out;
    std::string line;
    std::size_t lineno = 1;
    while (detail::next_line(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = detail::csv_fields(line);
        if (fields.size() != 3) {
            throw IoError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
        }
        out.axis.push_back(detail::parse_double(fields[0], path, lineno));
        out.i.push_back(detail::parse_double(fields[1], path, lineno));
        out.q.push_back(detail::parse_double(fields[2], path, lineno));
    }
    return out;
}

// ---------------------------------------------------------------------------
// calibration chain

namespace detail {

inline json poly_to_json(const ScaledPoly<double>& p) {
    return json{{"center", p.center}, {"scale", p.scale}, {"coeffs", p.coeffs}};
}

inline ScaledPoly<double> poly_from_json(const json& j, const std::string& path) {
    ScaledPoly<double> p;
    p.center = json_get<double>(j, "center", path);
    p.scale = json_get<double>(j, "scale", path);
    p.coeffs = json_get<std::vector<double>>(j, "coeffs", path);
    return p;
}

inline json circle_to_json(const Circle& c) {
    return json{{"ci", c.ci}, {"cq", c.cq}, {"radius", c.radius}};
}

inline Circle circle_from_json(const json& j, const std::string& path) {
    return {json_get<double>(j, "ci", path), json_get<double>(j, "cq", path),
            json_get<double>(j, "radius", path)};
}

}  // namespace detail

inline void write_calibration_json(const std::string& path, const CalibrationChain& chain) {
    std::vector<double> delay_re, delay_im;
    for (const auto& v : chain.delay.value) {
        delay_re.push_back(v.real());
        delay_im.push_back(v.imag());
    }
    const json j{
        {"delay",
         {{"freq_hz", chain.delay.freq_hz}, {"re", delay_re}, {"im", delay_im}}},
        {"ellipse",
         {{"i0", chain.ellipse.i0},
          {"q0", chain.ellipse.q0},
          {"a_i", chain.ellipse.a_i},
          {"a_q", chain.ellipse.a_q},
          {"gamma", chain.ellipse.gamma}}},
        {"bg_amplitude", detail::poly_to_json(chain.bg_amplitude)},
        {"bg_phase", detail::poly_to_json(chain.bg_phase)},
        {"center_rotation_rad", chain.center_rotation_rad},
        {"rotation_center", detail::circle_to_json(chain.rotation_center)},
        {"asymmetry_theta_rad", chain.asymmetry_theta_rad},
        {"circle", detail::circle_to_json(chain.circle)},
        {"band_lo_hz", chain.band_lo_hz},
        {"band_hi_hz", chain.band_hi_hz},
        {"rms_over_radius", chain.rms_over_radius},
        {"data_rms_over_radius", chain.data_rms_over_radius}};
    write_json_file(path, j);
}

inline CalibrationChain read_calibration_json(const std::string& path) {
    const json j = read_json_file(path);
    CalibrationChain chain;
    const json jd = detail::json_get<json>(j, "delay", path);
    chain.delay.freq_hz = detail::json_get<std::vector<double>>(jd, "freq_hz", path);
    const auto re = detail::json_get<std::vector<double>>(jd, "re", path);
    const auto im = detail::json_get<std::vector<double>>(jd, "im", path);
    if (re.size() != im.size() || re.size() != chain.delay.freq_hz.size()) {
        throw IoError(path + ": delay arrays disagree in length");
    }
    for (std::size_t k = 0; k < re.size(); ++k) chain.delay.value.emplace_back(re[k], im[k]);
    const json je = detail::json_get<json>(j, "ellipse", path);
    chain.ellipse.i0 = detail::json_get<double>(je, "i0", path);
    chain.ellipse.q0 = detail::json_get<double>(je, "q0", path);
    chain.ellipse.a_i = detail::json_get<double>(je, "a_i", path);
    chain.ellipse.a_q = detail::json_get<double>(je, "a_q", path);
    chain.ellipse.gamma = detail::json_get<double>(je, "gamma", path);
    chain.bg_amplitude = detail::poly_from_json(detail::json_get<json>(j, "bg_amplitude", path), path);
    chain.bg_phase = detail::poly_from_json(detail::json_get<json>(j, "bg_phase", path), path);
    chain.center_rotation_rad = detail::json_get<double>(j, "center_rotation_rad", path);
    chain.rotation_center = detail::circle_from_json(detail::json_get<json>(j, "rotation_center", path), path);
    chain.asymmetry_theta_rad = detail::json_get<double>(j, "asymmetry_theta_rad", path);
    chain.circle = detail::circle_from_json(detail::json_get<json>(j, "circle", path), path);
    chain.band_lo_hz = detail::json_get<double>(j, "band_lo_hz", path);
    chain.band_hi_hz = detail::json_get<double>(j, "band_hi_hz", path);
    chain.rms_over_radius = detail::json_get<double>(j, "rms_over_radius", path);
    chain.data_rms_over_radius = detail::json_get<double>(j, "data_rms_over_radius", path);
    return chain;
}

// ---------------------------------------------------------------------------
// optimum-filter model

inline void write_of_model_json(const std::string& path, const OfModel& model) {
    std::vector<double> tr_re, tr_im;
    for (const auto& v : model.transfer) {
        tr_re.push_back(v.real());
        tr_im.push_back(v.imag());
    }
    write_json_file(path, json{{"template", model.template_samples},
                               {"noise_psd", model.noise_psd},
                               {"transfer_re", tr_re},
                               {"transfer_im", tr_im},
                               {"normalization", model.normalization}});
}

inline OfModel read_of_model_json(const std::string& path) {
    const json j = read_json_file(path);
    OfModel model;
    model.template_samples = detail::json_get<std::vector<double>>(j, "template", path);
    model.noise_psd = detail::json_get<std::vector<double>>(j, "noise_psd", path);
    const auto re = detail::json_get<std::vector<double>>(j, "transfer_re", path);
    const auto im = detail::json_get<std::vector<double>>(j, "transfer_im", path);
    if (re.size() != im.size()) throw IoError(path + ": transfer arrays disagree in length");
    for (std::size_t k = 0; k < re.size(); ++k) model.transfer.emplace_back(re[k], im[k]);
    model.normalization = detail::json_get<double>(j, "normalization", path);
    if (model.template_samples.size() != model.transfer.size() ||
        model.noise_psd.size() != model.template_samples.size() / 2 + 1) {
        throw IoError(path + ": filter model arrays disagree in length");
    }
    return model;
}

}  // namespace mkid
