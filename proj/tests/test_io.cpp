#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mkid/io.hpp"

namespace fs = std::filesystem;

namespace {

// Every test writes into its own directory under the system temp root and
// cleans up on scope exit, so reruns and parallel test shards cannot collide.
struct TempDir {
    fs::path dir;

    explicit TempDir(const std::string& name) {
        dir = fs::temp_directory_path() / ("mkid_io_" + name + "_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }

    std::string operator/(const std::string& leaf) const { return (dir / leaf).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    f << content;
}

mkid::ComplexSweep sample_sweep() {
    mkid::ComplexSweep sweep;
    for (int k = 0; k < 24; ++k) {
        sweep.freq_hz.push_back(5.3e9 + 1234.56789012345 * k);
        sweep.s21.emplace_back(std::cos(0.1 * k) / 3.0, -1e-7 * k + 0.25);
    }
    sweep.meta.resonator_id = "r0";
    return sweep;
}

}  // namespace

TEST_CASE("fmt17 round-trips doubles exactly", "[io]") {
    const double values[] = {1.0 / 3.0, 0.1, -0.0,    1e-300, 9.87654321e17,
                             M_PI,      2.0, -5e-324, 0.0};
    for (double v : values) {
        const std::string s = mkid::fmt17(v);
        const double back = std::strtod(s.c_str(), nullptr);
        REQUIRE(std::memcmp(&back, &v, sizeof v) == 0);
    }
}

TEST_CASE("sweep CSV round-trip is exact and rewrite is byte-identical", "[io]") {
    TempDir tmp("sweep");
    const mkid::ComplexSweep sweep = sample_sweep();
    const std::string a = tmp / "sweep_a.csv";
    const std::string b = tmp / "sweep_b.csv";

    mkid::write_sweep_csv(a, sweep);
    const mkid::ComplexSweep back = mkid::read_sweep_csv(a);

    REQUIRE(back.freq_hz.size() == sweep.freq_hz.size());
    for (std::size_t k = 0; k < sweep.freq_hz.size(); ++k) {
        REQUIRE(back.freq_hz[k] == sweep.freq_hz[k]);
        REQUIRE(back.s21[k] == sweep.s21[k]);
    }

    mkid::write_sweep_csv(b, back);
    REQUIRE(slurp(a) == slurp(b));
}

TEST_CASE("sweep CSV rejects malformed input", "[io]") {
    TempDir tmp("sweep_bad");

    SECTION("missing file") {
        REQUIRE_THROWS_AS(mkid::read_sweep_csv(tmp / "nope.csv"), mkid::IoError);
    }
    SECTION("wrong header") {
        const std::string p = tmp / "h.csv";
        spit(p, "freq,re,im\n1,2,3\n");
        REQUIRE_THROWS_AS(mkid::read_sweep_csv(p), mkid::IoError);
    }
    SECTION("non-numeric field") {
        const std::string p = tmp / "n.csv";
        std::string body = "freq_hz,re,im\n";
        for (int k = 0; k < 20; ++k) body += "1e9,0.5,0.5\n";
        body += "1e9,abc,0.5\n";
        spit(p, body);
        REQUIRE_THROWS_AS(mkid::read_sweep_csv(p), mkid::IoError);
    }
    SECTION("wrong field count") {
        const std::string p = tmp / "c.csv";
        spit(p, "freq_hz,re,im\n1e9,0.5\n");
        REQUIRE_THROWS_AS(mkid::read_sweep_csv(p), mkid::IoError);
    }
    SECTION("too few points fails sweep validation") {
        const std::string p = tmp / "s.csv";
        spit(p, "freq_hz,re,im\n1e9,0.5,0.5\n");
        REQUIRE_THROWS_AS(mkid::read_sweep_csv(p), mkid::IoError);
    }
}

TEST_CASE("qi series CSV + sidecar round-trip", "[io]") {
    TempDir tmp("qi");
    mkid::QiSeries series;
    for (int k = 0; k < 8; ++k) {
        series.temperature_k.push_back(0.04 + 0.01 * k);
        series.inv_qi.push_back(1.0 / 6440.0 + 1e-6 * k);
        series.inv_qi_err.push_back(1.5e-6 + 1e-8 * k);
    }
    series.f0_hz = 5.3806e9;
    series.resonator_id = "chip3/res11";

    const std::string p = tmp / "qi.csv";
    mkid::write_qi_series_csv(p, series, 0.05);
    const mkid::QiSeriesFile back = mkid::read_qi_series_csv(p);

    REQUIRE(back.alpha == 0.05);
    REQUIRE(back.series.f0_hz == series.f0_hz);
    REQUIRE(back.series.resonator_id == series.resonator_id);
    REQUIRE(back.series.temperature_k == series.temperature_k);
    REQUIRE(back.series.inv_qi == series.inv_qi);
    REQUIRE(back.series.inv_qi_err == series.inv_qi_err);

    SECTION("missing sidecar is an I/O error") {
        fs::remove(p + ".json");
        REQUIRE_THROWS_AS(mkid::read_qi_series_csv(p), mkid::IoError);
    }
    SECTION("sidecar missing a key is an I/O error") {
        spit(p + ".json", "{\"resonator_id\": \"x\", \"f0_hz\": 1.0}\n");
        REQUIRE_THROWS_AS(mkid::read_qi_series_csv(p), mkid::IoError);
    }
}

TEST_CASE("binary record file round-trip preserves samples bit-exactly", "[io]") {
    TempDir tmp("rec");
    std::vector<mkid::Record> records(3);
    for (std::size_t r = 0; r < records.size(); ++r) {
        records[r].sample_rate_hz = 5e7;
        records[r].trigger_index = 1000;
        for (int k = 0; k < 50; ++k) {
            records[r].samples.push_back(std::sin(0.01 * k + static_cast<double>(r)) * 1e-3);
        }
    }

    const std::string p = tmp / "records.bin";
    mkid::write_records(p, records);
    const std::vector<mkid::Record> back = mkid::read_records(p);

    REQUIRE(back.size() == records.size());
    for (std::size_t r = 0; r < records.size(); ++r) {
        REQUIRE(back[r].sample_rate_hz == 5e7);
        REQUIRE(back[r].trigger_index == 1000);
        REQUIRE(back[r].samples == records[r].samples);
    }

    SECTION("rewrite is byte-identical") {
        const std::string q = tmp / "records2.bin";
        mkid::write_records(q, back);
        REQUIRE(slurp(p) == slurp(q));
    }
    SECTION("heterogeneous trigger indices collapse to -1") {
        auto mixed = records;
        mixed[1].trigger_index = 999;
        const std::string q = tmp / "mixed.bin";
        mkid::write_records(q, mixed);
        REQUIRE(mkid::read_records(q).front().trigger_index == -1);
    }
    SECTION("truncated payload is an I/O error") {
        const std::string full = slurp(p);
        const std::string q = tmp / "trunc.bin";
        spit(q, full.substr(0, full.size() - 17));
        REQUIRE_THROWS_AS(mkid::read_records(q), mkid::IoError);
    }
    SECTION("garbage header is an I/O error") {
        const std::string q = tmp / "hdr.bin";
        spit(q, "not a header\n");
        REQUIRE_THROWS_AS(mkid::read_records(q), mkid::IoError);
    }
}

TEST_CASE("CSV record fallback round-trips through the text format", "[io]") {
    TempDir tmp("reccsv");
    std::vector<mkid::Record> records(2);
    for (std::size_t r = 0; r < records.size(); ++r) {
        records[r].sample_rate_hz = 1e6;
        for (int k = 0; k < 10; ++k) records[r].samples.push_back(0.125 * k + static_cast<double>(r));
    }

    const std::string p = tmp / "records.csv";
    mkid::write_records(p, records);
    const std::vector<mkid::Record> back = mkid::read_records(p, 1e6);

    REQUIRE(back.size() == 2);
    REQUIRE(back[0].samples == records[0].samples);
    REQUIRE(back[1].samples == records[1].samples);
    REQUIRE(back[0].sample_rate_hz == 1e6);

    SECTION("reader requires a sample rate for CSV") {
        REQUIRE_THROWS_AS(mkid::read_records(p), mkid::InvalidInput);
    }
    SECTION("non-contiguous record index is an I/O error") {
        const std::string q = tmp / "gap.csv";
        spit(q, "record_index,sample_index,value\n1,0,0.5\n");
        REQUIRE_THROWS_AS(mkid::read_records(q, 1e6), mkid::IoError);
    }
    SECTION("ragged sample index is an I/O error") {
        const std::string q = tmp / "ragged.csv";
        spit(q, "record_index,sample_index,value\n0,0,0.5\n0,2,0.5\n");
        REQUIRE_THROWS_AS(mkid::read_records(q, 1e6), mkid::IoError);
    }
}

TEST_CASE("write_records validates its input", "[io]") {
    TempDir tmp("recbad");
    REQUIRE_THROWS_AS(mkid::write_records(tmp / "x.bin", {}), mkid::InvalidInput);

    std::vector<mkid::Record> ragged(2);
    ragged[0].sample_rate_hz = ragged[1].sample_rate_hz = 1e6;
    ragged[0].samples = {1.0, 2.0};
    ragged[1].samples = {1.0};
    REQUIRE_THROWS_AS(mkid::write_records(tmp / "x.bin", ragged), mkid::InvalidInput);
}

TEST_CASE("filtered-amplitude CSV round-trip keeps tags", "[io]") {
    TempDir tmp("off");
    mkid::OffTable table;
    table.record_index = {0, 1, 2, 5};
    table.value = {0.62, 0.0, -0.013, 1.0 / 7.0};
    table.tag = {"good", "empty", "noise", "multiple"};

    const std::string p = tmp / "off.csv";
    mkid::write_off_csv(p, table);
    const mkid::OffTable back = mkid::read_off_csv(p);

    REQUIRE(back.record_index == table.record_index);
    REQUIRE(back.value == table.value);
    REQUIRE(back.tag == table.tag);

    SECTION("column size mismatch refuses to write") {
        mkid::OffTable bad = table;
        bad.tag.pop_back();
        REQUIRE_THROWS_AS(mkid::write_off_csv(tmp / "bad.csv", bad), mkid::InvalidInput);
    }
}

TEST_CASE("IQ trace CSV round-trip", "[io]") {
    TempDir tmp("trace");
    mkid::IqTrace trace;
    for (int k = 0; k < 12; ++k) {
        trace.axis.push_back(5.3e9 + 1e3 * k);
        trace.i.push_back(std::cos(0.2 * k));
        trace.q.push_back(std::sin(0.2 * k));
    }
    const std::string p = tmp / "trace.csv";
    mkid::write_trace_csv(p, trace);
    const mkid::IqTrace back = mkid::read_trace_csv(p);
    REQUIRE(back.axis == trace.axis);
    REQUIRE(back.i == trace.i);
    REQUIRE(back.q == trace.q);
}

TEST_CASE("calibration chain JSON round-trip covers every field", "[io]") {
    TempDir tmp("chain");
    mkid::CalibrationChain chain;
    chain.delay.freq_hz = {5.2e9, 5.3e9, 5.4e9};
    chain.delay.value = {{0.01, -0.02}, {0.0, 0.0}, {-0.03, 0.04}};
    chain.ellipse = {0.02, -0.015, 1.15, 0.93, 1.35};
    chain.bg_amplitude = {5.3e9, 1e8, {1.8, 0.02, 0.01}};
    chain.bg_phase = {5.3e9, 1e8, {0.3, 0.05, -0.02}};
    chain.center_rotation_rad = 0.4;
    chain.rotation_center = {0.31, -0.12, 0.55};
    chain.asymmetry_theta_rad = 0.5;
    chain.circle = {0.30, -0.10, 0.52};
    chain.band_lo_hz = 5.25e9;
    chain.band_hi_hz = 5.35e9;
    chain.rms_over_radius = 3.2e-4;
    chain.data_rms_over_radius = 1.1e-3;

    const std::string p = tmp / "chain.json";
    mkid::write_calibration_json(p, chain);
    const mkid::CalibrationChain back = mkid::read_calibration_json(p);

    REQUIRE(back.delay.freq_hz == chain.delay.freq_hz);
    REQUIRE(back.delay.value == chain.delay.value);
    REQUIRE(back.ellipse.i0 == chain.ellipse.i0);
    REQUIRE(back.ellipse.q0 == chain.ellipse.q0);
    REQUIRE(back.ellipse.a_i == chain.ellipse.a_i);
    REQUIRE(back.ellipse.a_q == chain.ellipse.a_q);
    REQUIRE(back.ellipse.gamma == chain.ellipse.gamma);
    REQUIRE(back.bg_amplitude.center == chain.bg_amplitude.center);
    REQUIRE(back.bg_amplitude.scale == chain.bg_amplitude.scale);
    REQUIRE(back.bg_amplitude.coeffs == chain.bg_amplitude.coeffs);
    REQUIRE(back.bg_phase.coeffs == chain.bg_phase.coeffs);
    REQUIRE(back.center_rotation_rad == chain.center_rotation_rad);
    REQUIRE(back.rotation_center.ci == chain.rotation_center.ci);
    REQUIRE(back.rotation_center.cq == chain.rotation_center.cq);
    REQUIRE(back.rotation_center.radius == chain.rotation_center.radius);
    REQUIRE(back.asymmetry_theta_rad == chain.asymmetry_theta_rad);
    REQUIRE(back.circle.ci == chain.circle.ci);
    REQUIRE(back.circle.radius == chain.circle.radius);
    REQUIRE(back.band_lo_hz == chain.band_lo_hz);
    REQUIRE(back.band_hi_hz == chain.band_hi_hz);
    REQUIRE(back.rms_over_radius == chain.rms_over_radius);
    REQUIRE(back.data_rms_over_radius == chain.data_rms_over_radius);

    SECTION("round-tripped chain transforms points identically") {
        const std::complex<double> z{0.4, -0.2};
        REQUIRE(back.apply_point(5.31e9, z) == chain.apply_point(5.31e9, z));
    }
    SECTION("rewrite is byte-identical") {
        const std::string q = tmp / "chain2.json";
        mkid::write_calibration_json(q, back);
        REQUIRE(slurp(p) == slurp(q));
    }
    SECTION("missing key is an I/O error") {
        mkid::json j = mkid::read_json_file(p);
        j.erase("ellipse");
        mkid::write_json_file(p, j);
        REQUIRE_THROWS_AS(mkid::read_calibration_json(p), mkid::IoError);
    }
}

TEST_CASE("filter model JSON round-trip", "[io]") {
    TempDir tmp("ofm");
    mkid::OfModel model;
    for (int k = 0; k < 16; ++k) {
        model.template_samples.push_back(std::exp(-0.3 * k) - std::exp(-0.9 * k));
        model.transfer.emplace_back(0.1 * k, -0.05 * k);
    }
    for (int k = 0; k <= 8; ++k) model.noise_psd.push_back(1e-6 * (k + 1));
    model.normalization = 123.456;

    const std::string p = tmp / "model.json";
    mkid::write_of_model_json(p, model);
    const mkid::OfModel back = mkid::read_of_model_json(p);

    REQUIRE(back.template_samples == model.template_samples);
    REQUIRE(back.noise_psd == model.noise_psd);
    REQUIRE(back.transfer == model.transfer);
    REQUIRE(back.normalization == model.normalization);

    SECTION("inconsistent array lengths are an I/O error") {
        mkid::json j = mkid::read_json_file(p);
        j["noise_psd"] = std::vector<double>{1.0, 2.0};
        mkid::write_json_file(p, j);
        REQUIRE_THROWS_AS(mkid::read_of_model_json(p), mkid::IoError);
    }
}

TEST_CASE("generic JSON helpers reject malformed documents", "[io]") {
    TempDir tmp("json");
    const std::string p = tmp / "bad.json";
    spit(p, "{\"oops\": \n");
    REQUIRE_THROWS_AS(mkid::read_json_file(p), mkid::IoError);
    REQUIRE_THROWS_AS(mkid::read_json_file(tmp / "absent.json"), mkid::IoError);
}
