#include "streamdiff/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "streamdiff/errors.hpp"

namespace streamdiff {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& value, const std::string& key, int line_number) {
    T out{};
    const char* begin = value.data();
    const char* end   = begin + value.size();
    const auto result = std::from_chars(begin, end, out);
    if (result.ec != std::errc{} || result.ptr != end) {
        throw InputError("config line " + std::to_string(line_number) + ": key " + key +
                         " wants a number, got \"" + value + "\"");
    }
    return out;
}

}  // namespace

void apply_config_line(RunConfig& c, const std::string& raw, int line_number) {
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') return;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
        throw InputError("config line " + std::to_string(line_number) +
                         ": expected key=value, got \"" + line + "\"");
    }
    const std::string key   = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    ModelConfig& m = c.pipeline.model;
    if (key == "channels")               m.channels = parse_number<int>(value, key, line_number);
    else if (key == "grid_h")            m.grid_h = parse_number<int>(value, key, line_number);
    else if (key == "grid_w")            m.grid_w = parse_number<int>(value, key, line_number);
    else if (key == "width")             m.width = parse_number<int>(value, key, line_number);
    else if (key == "heads")             m.heads = parse_number<int>(value, key, line_number);
    else if (key == "layers")            m.layers = parse_number<int>(value, key, line_number);
    else if (key == "audio_dim")         m.audio_dim = parse_number<int>(value, key, line_number);
    else if (key == "identity_dim")      m.identity_dim = parse_number<int>(value, key, line_number);
    else if (key == "frames_per_block")  m.frames_per_block = parse_number<int>(value, key, line_number);
    else if (key == "sink_frames")       c.pipeline.sink_frames = parse_number<Index>(value, key, line_number);
    else if (key == "recent_frames")     c.pipeline.recent_frames = parse_number<Index>(value, key, line_number);
    else if (key == "window_blocks")     c.pipeline.window_blocks = parse_number<Index>(value, key, line_number);
    else if (key == "reset_threshold")   c.pipeline.reset_threshold = parse_number<std::int64_t>(value, key, line_number);
    else if (key == "seed")              c.seed = parse_number<std::uint64_t>(value, key, line_number);
    else if (key == "blocks")            c.blocks = parse_number<std::int64_t>(value, key, line_number);
    else if (key == "audio")             c.audio_path = value;
    else if (key == "checkpoint")        c.checkpoint_path = value;
    else if (key == "out")               c.out_path = value;
    else if (key == "events")            c.events_path = value;
    else {
        throw InputError("config line " + std::to_string(line_number) + ": unknown key \"" + key +
                         "\"");
    }
}

RunConfig parse_run_config(std::istream& in) {
    RunConfig c;
    std::string line;
    int line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        apply_config_line(c, line, line_number);
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open config file " + path);
    }
    return parse_run_config(in);
}

std::string dump_run_config(const RunConfig& c) {
    std::ostringstream out;
    const ModelConfig& m = c.pipeline.model;
    out << "channels=" << m.channels << '\n'
        << "grid_h=" << m.grid_h << '\n'
        << "grid_w=" << m.grid_w << '\n'
        << "width=" << m.width << '\n'
        << "heads=" << m.heads << '\n'
        << "layers=" << m.layers << '\n'
        << "audio_dim=" << m.audio_dim << '\n'
        << "identity_dim=" << m.identity_dim << '\n'
        << "frames_per_block=" << m.frames_per_block << '\n'
        << "sink_frames=" << c.pipeline.sink_frames << '\n'
        << "recent_frames=" << c.pipeline.recent_frames << '\n'
        << "window_blocks=" << c.pipeline.window_blocks << '\n'
        << "reset_threshold=" << c.pipeline.reset_threshold << '\n'
        << "seed=" << c.seed << '\n'
        << "blocks=" << c.blocks << '\n'
        << "audio=" << c.audio_path << '\n'
        << "checkpoint=" << c.checkpoint_path << '\n'
        << "out=" << c.out_path << '\n'
        << "events=" << c.events_path << '\n';
    return out.str();
}

}  // namespace streamdiff
