#pragma once

#include <span>
#include <string>
#include <vector>

namespace sdar {

/// One experiment measurement. Numeric fields hold -1 when the experiment
/// did not measure them; all stored values must be finite. The text fields
/// must not contain commas, quotes or line breaks (the CSV is unquoted).
struct MetricsRow {
    std::string experiment;
    std::string config;
    double recon_mse = -1.0;
    double val_nll = -1.0;
    double sem_acc = -1.0;
    double det_acc = -1.0;
    double toy_fid = -1.0;
    double class_acc = -1.0;

    void validate() const;
};

// Column order is fixed:
//   experiment,config,recon_mse,val_nll,sem_acc,det_acc,toy_fid,class_acc
// Doubles are written in shortest round-trip form, so parsing a line back
// recovers the exact values.
std::string metrics_csv_header();
std::string metrics_to_csv(const MetricsRow& row);
MetricsRow metrics_from_csv(const std::string& line);

void save_metrics(const std::string& path, std::span<const MetricsRow> rows);
std::vector<MetricsRow> load_metrics(const std::string& path);

}  // namespace sdar
