#pragma once

#include <iosfwd>
#include <string>

#include "streamdiff/pipeline.hpp"

namespace streamdiff {

// Everything a generation run needs, loadable from a flat key=value file.
// Every key is optional; defaults below. Unknown keys are input errors so a
// typo cannot silently fall back to a default.
struct RunConfig {
    PipelineConfig pipeline;
    std::uint64_t seed = 1;
    std::int64_t blocks = 16;
    std::string audio_path;
    std::string checkpoint_path;
    std::string out_path;
    std::string events_path;

    void validate() const { pipeline.validate(); }
};

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::string& path);
void apply_config_line(RunConfig& config, const std::string& line, int line_number);
std::string dump_run_config(const RunConfig& config);

}  // namespace streamdiff
