#include "sdar/metrics.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sdar/config.hpp"

namespace sdar {

namespace {

constexpr const char* kHeader =
    "experiment,config,recon_mse,val_nll,sem_acc,det_acc,toy_fid,class_acc";

void check_text(const std::string& field, const std::string& what) {
    for (char c : field) {
        if (c == ',' || c == '"' || c == '\n' || c == '\r')
            throw InvariantViolation("metrics " + what + " contains a CSV delimiter: '" +
                                     field + "'");
    }
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw InvariantViolation("metrics: bad numeric field '" + s + "'");
    return v;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

}  // namespace

void MetricsRow::validate() const {
    check_text(experiment, "experiment");
    check_text(config, "config");
    if (experiment.empty()) throw InvariantViolation("metrics experiment id is empty");
    for (double v : {recon_mse, val_nll, sem_acc, det_acc, toy_fid, class_acc})
        if (!std::isfinite(v)) throw InvariantViolation("metrics value is not finite");
}

std::string metrics_csv_header() { return kHeader; }

std::string metrics_to_csv(const MetricsRow& row) {
    row.validate();
    std::string out = row.experiment;
    out += ',';
    out += row.config;
    for (double v : {row.recon_mse, row.val_nll, row.sem_acc, row.det_acc, row.toy_fid,
                     row.class_acc}) {
        out += ',';
        out += format_double(v);
    }
    return out;
}

MetricsRow metrics_from_csv(const std::string& line) {
    const std::vector<std::string> f = split_fields(line);
    if (f.size() != 8)
        throw InvariantViolation("metrics row needs 8 columns, got " +
                                 std::to_string(f.size()));
    MetricsRow row;
    row.experiment = f[0];
    row.config = f[1];
    row.recon_mse = parse_double(f[2]);
    row.val_nll = parse_double(f[3]);
    row.sem_acc = parse_double(f[4]);
    row.det_acc = parse_double(f[5]);
    row.toy_fid = parse_double(f[6]);
    row.class_acc = parse_double(f[7]);
    row.validate();
    return row;
}

void save_metrics(const std::string& path, std::span<const MetricsRow> rows) {
    std::ofstream os(path);
    if (!os.is_open()) throw MissingArtifact("cannot write metrics file: " + path);
    os << kHeader << '\n';
    for (const MetricsRow& row : rows) os << metrics_to_csv(row) << '\n';
    if (!os.good()) throw InvariantViolation("failed writing metrics file: " + path);
}

std::vector<MetricsRow> load_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is.is_open()) throw MissingArtifact("cannot open metrics file: " + path);
    std::string line;
    if (!std::getline(is, line))
        throw InvariantViolation("metrics file is empty: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kHeader)
        throw InvariantViolation("metrics file has an unexpected header: " + line);
    std::vector<MetricsRow> rows;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        rows.push_back(metrics_from_csv(line));
    }
    return rows;
}

}  // namespace sdar
