#pragma once

#include <string>
#include <vector>

namespace streamdiff {

// One verification suite outcome. Suites are end-to-end properties of the
// engine (schedule shape, cache equivalence, determinism, ...), each with its
// tolerance pinned in the implementation.
struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

const std::vector<std::string>& verify_suite_names();

// Runs one suite by name; unknown names are argument errors. Exceptions
// escaping a suite are folded into a failed result.
CheckResult run_verify_suite(const std::string& name);

std::vector<CheckResult> run_all_suites();

}  // namespace streamdiff
