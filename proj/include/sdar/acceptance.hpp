#pragma once

#include <span>
#include <string>
#include <vector>

namespace sdar {

/// Outcome of one numbered acceptance check. `detail` carries the measured
/// quantities so a failing line is diagnosable from the log alone.
struct CriterionResult {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

/// Runs acceptance check `id` (1-12). Checks that write artifacts place
/// them under `work_dir`, which must already exist.
CriterionResult run_criterion(int id, const std::string& work_dir);

std::vector<CriterionResult> run_criteria(std::span<const int> ids,
                                          const std::string& work_dir);

/// The fast subset: everything except the training-heavy trend checks.
std::vector<int> selftest_ids();

/// "[PASS] 7 guidance-degeneracies ..." style line for one result.
std::string format_criterion(const CriterionResult& r);

}  // namespace sdar
