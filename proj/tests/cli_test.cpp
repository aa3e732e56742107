#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "streamdiff/denoiser.hpp"
#include "streamdiff/diffusion.hpp"
#include "streamdiff/formats.hpp"
#include "streamdiff/pipeline.hpp"

using namespace streamdiff;

namespace {

std::filesystem::path work_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "streamdiff-cli-tests";
    std::filesystem::create_directories(dir);
    return dir;
}

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

CmdResult run_cli(const std::string& args) {
    static int counter = 0;
    const auto dir = work_dir();
    const auto out_path = dir / ("stdout-" + std::to_string(++counter) + ".txt");
    const auto err_path = dir / ("stderr-" + std::to_string(counter) + ".txt");
    const std::string cmd = std::string(STREAMDIFF_BIN) + " " + args + " >" + out_path.string() +
                            " 2>" + err_path.string();
    const int raw = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out  = slurp_text(out_path);
    r.err  = slurp_text(err_path);
    return r;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

// Config matching the checkpoint helpers below; small extents keep runs fast.
const char* kSmallConfig =
    "channels=4\n"
    "grid_h=2\n"
    "grid_w=2\n"
    "width=32\n"
    "heads=2\n"
    "layers=2\n"
    "audio_dim=8\n"
    "identity_dim=8\n";

ModelConfig small_model() {
    ModelConfig m;
    m.channels = 4;
    m.grid_h = 2;
    m.grid_w = 2;
    m.width = 32;
    m.heads = 2;
    m.layers = 2;
    m.audio_dim = 8;
    m.identity_dim = 8;
    return m;
}

}  // namespace

TEST_CASE("schedule subcommand prints the timestep table") {
    const CmdResult r = run_cli("schedule");
    CHECK(r.code == 0);
    CHECK(r.out == schedule_tsv());
}

TEST_CASE("argument errors exit with code 1") {
    CHECK(run_cli("no-such-subcommand").code == 1);
    CHECK(run_cli("").code == 1);
    CHECK(run_cli("schedule --bogus-flag").code == 1);
    CHECK(run_cli("generate --blocks").code == 1);  // missing value
}

TEST_CASE("generate validates inputs before touching the output") {
    const auto dir = work_dir();
    const auto out = dir / "never-written.javl";
    std::filesystem::remove(out);

    CmdResult r = run_cli("generate --blocks 2 --out " + out.string());
    CHECK(r.code == 1);  // neither --audio nor --synth-audio
    CHECK_FALSE(std::filesystem::exists(out));

    r = run_cli("generate --blocks 2 --audio /nonexistent/a.jaaf --out " + out.string());
    CHECK(r.code == 1);
    CHECK_FALSE(std::filesystem::exists(out));

    r = run_cli("generate --blocks 0 --synth-audio --out " + out.string());
    CHECK(r.code == 1);
    CHECK_FALSE(std::filesystem::exists(out));

    r = run_cli("generate --blocks 2 --synth-audio");
    CHECK(r.code == 1);  // no output path
}

TEST_CASE("generate writes a readable stream and reruns identically") {
    const auto dir = work_dir();
    const auto cfg = dir / "small.cfg";
    std::ofstream(cfg) << kSmallConfig;
    const auto a = dir / "gen-a.javl";
    const auto b = dir / "gen-b.javl";
    const auto events = dir / "gen-a-events.jsonl";

    const std::string base = "generate --config " + cfg.string() +
                             " --blocks 4 --seed 5 --synth-audio --out ";
    CmdResult r = run_cli(base + a.string() + " --events " + events.string());
    REQUIRE(r.code == 0);

    const JavlData da = read_javl(a.string());
    CHECK(da.c == 4);
    CHECK(da.h == 2);
    CHECK(da.w == 2);
    CHECK(da.frames_per_block == 3);
    CHECK(da.frames.dim(0) == 12);

    // Same seed, fresh process, identical payload.
    r = run_cli(base + b.string());
    REQUIRE(r.code == 0);
    const JavlData db = read_javl(b.string());
    REQUIRE(db.frames.size() == da.frames.size());
    CHECK(std::memcmp(da.frames.data(), db.frames.data(),
                      static_cast<size_t>(da.frames.size()) * sizeof(float)) == 0);

    // The event log is JSON lines covering the whole run.
    std::ifstream ev(events);
    REQUIRE(ev.good());
    std::string line;
    int lines = 0, emitted = 0;
    while (std::getline(ev, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.at("kind") == "emitted") ++emitted;
        ++lines;
    }
    CHECK(emitted == 4);
    CHECK(lines >= 11 + 4 + 4);  // one denoised per pass plus admissions and emissions
}

TEST_CASE("generate consumes audio feature files") {
    const auto dir = work_dir();
    const auto cfg = dir / "audio.cfg";
    std::ofstream(cfg) << kSmallConfig;
    const auto jaaf = dir / "features.jaaf";
    const auto out = dir / "from-audio.javl";
    write_jaaf(jaaf.string(), synth_audio(12, 8, 3));

    CmdResult r = run_cli("generate --config " + cfg.string() + " --blocks 4 --audio " +
                          jaaf.string() + " --out " + out.string());
    REQUIRE(r.code == 0);
    CHECK(read_javl(out.string()).frames.dim(0) == 12);

    // Too few frames for the requested blocks fails before writing.
    const auto out2 = dir / "starved.javl";
    r = run_cli("generate --config " + cfg.string() + " --blocks 5 --audio " + jaaf.string() +
                " --out " + out2.string());
    CHECK(r.code == 1);
    CHECK_FALSE(std::filesystem::exists(out2));
}

TEST_CASE("dump-config round trips through a file") {
    const CmdResult first = run_cli("generate --dump-config");
    REQUIRE(first.code == 0);
    CHECK(first.out.find("width=64\n") != std::string::npos);

    const auto dir = work_dir();
    const auto cfg = dir / "dumped.cfg";
    std::ofstream(cfg) << first.out;
    const CmdResult second = run_cli("generate --config " + cfg.string() + " --dump-config");
    REQUIRE(second.code == 0);
    CHECK(second.out == first.out);

    const auto bad = dir / "typo.cfg";
    std::ofstream(bad) << "widht=48\n";
    CHECK(run_cli("generate --config " + bad.string() + " --dump-config").code == 1);
}

TEST_CASE("checkpoints must match the run config") {
    const auto dir = work_dir();
    const auto ckpt = dir / "small.jadn";
    {
        Rng rng(8);
        const DenoiserParams params = DenoiserParams::init(small_model(), rng);
        save_checkpoint_file(params, ckpt.string());
    }

    // Default config (width 64) rejects a checkpoint trained at width 32.
    const auto out = dir / "ckpt-mismatch.javl";
    CmdResult r = run_cli("generate --blocks 1 --synth-audio --checkpoint " + ckpt.string() +
                          " --out " + out.string());
    CHECK(r.code == 1);
    CHECK_FALSE(std::filesystem::exists(out));

    const auto cfg = dir / "ckpt.cfg";
    std::ofstream(cfg) << kSmallConfig;
    const auto out2 = dir / "ckpt-match.javl";
    r = run_cli("generate --config " + cfg.string() + " --blocks 2 --synth-audio --checkpoint " +
                ckpt.string() + " --out " + out2.string());
    REQUIRE(r.code == 0);
    CHECK(read_javl(out2.string()).frames.dim(0) == 6);
}

TEST_CASE("bench prints machine readable counters") {
    const auto dir = work_dir();
    const auto cfg = dir / "bench.cfg";
    std::ofstream(cfg) << kSmallConfig;
    const CmdResult r = run_cli("bench --config " + cfg.string() + " --blocks 5 --seed 2");
    REQUIRE(r.code == 0);
    const auto kv = parse_kv(r.out);
    CHECK(kv.at("blocks_emitted") == "5");
    CHECK(kv.at("frames_emitted") == "15");
    CHECK(kv.at("forwards") == "12");
    CHECK(kv.count("frames_per_second") == 1);
    CHECK(kv.at("cache_constant_after_fill") == "1");
}

TEST_CASE("cache-dump emits one json line per resident frame") {
    const auto dir = work_dir();
    const auto cfg = dir / "dump.cfg";
    std::ofstream(cfg) << kSmallConfig;
    const CmdResult r = run_cli("cache-dump --config " + cfg.string() + " --blocks 6 --seed 4");
    REQUIRE(r.code == 0);
    std::istringstream in(r.out);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("frame_id"));
        CHECK(j.contains("is_sink"));
        ++lines;
    }
    CHECK(lines == 15);  // 3 pinned + 12 recent after 6 blocks
    CHECK(run_cli("cache-dump --blocks 0").code == 1);
}

TEST_CASE("verify runs a named suite") {
    const CmdResult r = run_cli("verify schedule");
    CHECK(r.code == 0);
    CHECK(r.out.find("PASS schedule") != std::string::npos);
    CHECK(run_cli("verify no-such-suite").code == 1);
}

TEST_CASE("distill-toy writes a report and a scatter csv") {
    const auto dir = work_dir();
    const auto report = dir / "dmd-report.json";
    const CmdResult r =
        run_cli("distill-toy --iters 40 --seed 2 --out " + report.string());
    REQUIRE(r.code == 0);
    CHECK(r.out.rfind("x,y\n", 0) == 0);
    const auto j = nlohmann::json::parse(slurp_text(report));
    CHECK(j.at("generator_updates").get<int>() == 40);
    CHECK(j.at("fake_updates").get<int>() == 8);
    CHECK(j.contains("kl_initial"));
    CHECK(j.contains("kl_final"));
}
