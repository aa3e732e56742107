// End-to-end acceptance gate: every engine-level property suite must pass.
// Each suite prints one line; the exit code folds them together for ctest.

#include <cstdio>
#include <vector>

#include "streamdiff/verify.hpp"

int main() {
    const std::vector<streamdiff::CheckResult> results = streamdiff::run_all_suites();
    bool all = true;
    int i = 0;
    for (const streamdiff::CheckResult& r : results) {
        ++i;
        std::printf("[%2d/%zu] %-12s %s (%.2fs) %s\n", i, results.size(), r.name.c_str(),
                    r.passed ? "PASS" : "FAIL", r.seconds, r.detail.c_str());
        std::fflush(stdout);
        all = all && r.passed;
    }
    return all ? 0 : 1;
}
