#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "sdar/acceptance.hpp"

using namespace sdar;

// Wall-clock ceilings for the checks that carry one. Generous against the
// measured times; they exist to catch pathological slowdowns, not to race.
static const std::map<int, double> budgets = {
    {1, 5.0}, {2, 10.0}, {5, 120.0}, {8, 900.0}, {9, 120.0}, {10, 900.0},
};

TEST_CASE("every acceptance check passes, one line per check") {
    const std::string work = "acceptance_work";
    std::filesystem::create_directories(work);

    double subset_seconds = 0.0;
    for (int id = 1; id <= 12; ++id) {
        const CriterionResult r = run_criterion(id, work);
        std::printf("%s\n", format_criterion(r).c_str());
        std::fflush(stdout);
        CHECK_MESSAGE(r.pass, r.name, ": ", r.detail);
        if (auto it = budgets.find(id); it != budgets.end())
            CHECK_MESSAGE(r.seconds < it->second, r.name, " overran its time budget");
        if (id <= 7 || id >= 11) subset_seconds += r.seconds;
    }
    // The fast subset backs the command-line self test, which promises to
    // finish in five minutes.
    std::printf("fast subset 1-7,11-12 total: %.1fs (budget 300s)\n", subset_seconds);
    CHECK(subset_seconds < 300.0);
}
