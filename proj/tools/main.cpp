#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "streamdiff/config.hpp"
#include "streamdiff/dmd.hpp"
#include "streamdiff/errors.hpp"
#include "streamdiff/formats.hpp"
#include "streamdiff/pipeline.hpp"
#include "streamdiff/verify.hpp"

namespace {

using namespace streamdiff;

// Conditioning that is not fed by files is synthesized deterministically
// from the run seed, so (seed, config, audio) pin the whole stream.
ConditioningBundle make_bundle(const RunConfig& config, const Tensor& audio) {
    const ModelConfig& m = config.pipeline.model;
    Rng master(config.seed);
    ConditioningBundle bundle;
    Rng id_rng       = master.fork("identity");
    bundle.identity  = randn(id_rng, {m.identity_dim});
    Rng ref_rng      = master.fork("reference");
    bundle.reference = randn(ref_rng, {m.channels, m.grid_h, m.grid_w});
    bundle.audio     = audio;
    return bundle;
}

DenoiserParams make_params(const RunConfig& config) {
    if (!config.checkpoint_path.empty()) {
        DenoiserParams params = load_checkpoint_file(config.checkpoint_path);
        if (!(params.config == config.pipeline.model)) {
            throw InputError("checkpoint " + config.checkpoint_path +
                             " was trained for a different model config");
        }
        return params;
    }
    Rng master(config.seed);
    Rng param_rng = master.fork("params");
    return DenoiserParams::init(config.pipeline.model, param_rng);
}

int run_generate(RunConfig config, bool synth) {
    config.validate();
    const ModelConfig& m = config.pipeline.model;
    if (config.blocks < 1) {
        throw InputError("generate needs blocks >= 1, got " + std::to_string(config.blocks));
    }
    if (config.out_path.empty()) {
        throw InputError("generate needs an output path (--out or out= in the config)");
    }

    // Validate every input before the output file exists, so a failed run
    // never leaves a partial stream behind.
    const Index needed = config.blocks * m.frames_per_block;
    Tensor audio;
    if (synth) {
        Rng master(config.seed);
        audio = synth_audio(needed, m.audio_dim, master.fork("audio").seed);
    } else {
        if (config.audio_path.empty()) {
            throw InputError("generate needs --audio (or --synth-audio)");
        }
        audio = read_jaaf(config.audio_path);
        if (audio.last_dim() != m.audio_dim) {
            throw InputError("audio file " + config.audio_path + " has dim " +
                             std::to_string(audio.last_dim()) + ", config wants " +
                             std::to_string(m.audio_dim));
        }
        if (audio.dim(0) < needed) {
            throw InputError("audio file " + config.audio_path + " has " +
                             std::to_string(audio.dim(0)) + " frames, " +
                             std::to_string(config.blocks) + " blocks need " +
                             std::to_string(needed));
        }
    }
    DenoiserParams params = make_params(config);

    config.pipeline.target_blocks = config.blocks;
    Pipeline pipeline(config.pipeline, make_bundle(config, audio), std::move(params),
                      config.seed);
    pipeline.close_audio();

    std::ofstream events_out;
    if (!config.events_path.empty()) {
        events_out.open(config.events_path);
        if (!events_out) {
            throw InputError("cannot open events file " + config.events_path);
        }
    }

    JavlWriter writer(config.out_path, m.channels, m.grid_h, m.grid_w, m.frames_per_block);
    pipeline.on_emit([&](std::int64_t, const Tensor& block) {
        for (int f = 0; f < m.frames_per_block; ++f) {
            writer.write_frame(Tensor({m.channels, m.grid_h, m.grid_w},
                                      std::vector<float>(block.data() + f * m.frame_elems(),
                                                         block.data() + (f + 1) * m.frame_elems())));
        }
    });

    try {
        while (pipeline.emitted_blocks() < config.blocks) {
            for (const StreamEvent& e : pipeline.run_pass()) {
                if (events_out.is_open()) {
                    events_out << event_to_json(e) << '\n';
                }
            }
            if (events_out.is_open()) events_out.flush();
        }
        writer.close();
    } catch (...) {
        // Half-written streams are worse than no stream.
        std::error_code ec;
        std::filesystem::remove(config.out_path, ec);
        if (!config.events_path.empty()) std::filesystem::remove(config.events_path, ec);
        throw;
    }

    std::cerr << "wrote " << writer.frames_written() << " frames (" << config.blocks
              << " blocks) to " << config.out_path << " in " << pipeline.pass_count()
              << " passes\n";
    return 0;
}

int run_bench(const RunConfig& config, std::int64_t blocks) {
    BenchReport r = bench(config.pipeline, blocks, config.seed);
    std::cout << "passes=" << r.passes << '\n'
              << "forwards=" << r.forwards << '\n'
              << "blocks_emitted=" << r.blocks_emitted << '\n'
              << "frames_emitted=" << r.frames_emitted << '\n'
              << "wall_seconds=" << r.wall_seconds << '\n'
              << "frames_per_second=" << r.frames_per_second << '\n'
              << "cache_frames_final=" << r.cache_frames_final << '\n'
              << "cache_frames_peak=" << r.cache_frames_peak << '\n'
              << "cache_constant_after_fill=" << (r.cache_constant_after_fill ? 1 : 0) << '\n'
              << "resets=" << r.resets << '\n';
    return 0;
}

int run_verify(const std::string& suite) {
    std::vector<CheckResult> results;
    if (suite == "all") {
        results = run_all_suites();
    } else {
        results.push_back(run_verify_suite(suite));
    }
    bool all = true;
    for (const CheckResult& r : results) {
        all = all && r.passed;
        std::printf("%s %-12s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                    r.seconds, r.detail.c_str());
    }
    std::fflush(stdout);
    return all ? 0 : 2;
}

int run_distill(int iters, std::uint64_t seed, const std::string& out_path) {
    Rng rng(seed);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 2500, rng);
    DmdOptions options;
    options.iterations = iters;
    options.seed       = seed;
    const DmdReport report = train_dmd(teacher, options);

    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) {
            throw InputError("cannot open " + out_path + " for writing");
        }
        out << dmd_report_json(report) << '\n';
    }
    std::cout << dmd_scatter_csv(report);
    std::cerr << "KL " << report.kl_initial << " -> " << report.kl_final << " over "
              << report.generator_updates << " generator / " << report.fake_updates
              << " fake updates\n";
    return 0;
}

int run_cache_dump(RunConfig config, std::int64_t blocks) {
    config.validate();
    if (blocks < 1) {
        throw InputError("cache-dump needs blocks >= 1, got " + std::to_string(blocks));
    }
    const ModelConfig& m = config.pipeline.model;
    Rng master(config.seed);
    Tensor audio = synth_audio(blocks * m.frames_per_block, m.audio_dim,
                               master.fork("audio").seed);
    config.pipeline.target_blocks = blocks;
    Pipeline pipeline(config.pipeline, make_bundle(config, audio), make_params(config),
                      config.seed);
    pipeline.close_audio();
    pipeline.run_until(blocks);
    pipeline.cache().dump(std::cout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streamdiff: streaming block-diffusion latent video engine"};
    app.require_subcommand(1);

    std::string config_path, audio_path, out_path, events_path, checkpoint_path;
    std::uint64_t seed = 0;
    std::int64_t blocks = 0;
    bool synth_audio_flag = false, dump_config = false;

    CLI::App* gen = app.add_subcommand("generate", "run the pipeline and write a latent stream");
    gen->add_option("--config", config_path, "key=value config file");
    gen->add_option("--audio", audio_path, "JAAF audio feature file");
    gen->add_option("--seed", seed, "run seed");
    gen->add_option("--blocks", blocks, "blocks to emit");
    gen->add_option("--out", out_path, "output JAVL path");
    gen->add_option("--events", events_path, "JSON-lines event log path");
    gen->add_option("--checkpoint", checkpoint_path, "denoiser checkpoint");
    gen->add_flag("--synth-audio", synth_audio_flag, "synthesize audio features from the seed");
    gen->add_flag("--dump-config", dump_config, "print the effective config and exit");

    std::int64_t bench_blocks = 100;
    CLI::App* bch = app.add_subcommand("bench", "timed synthetic run");
    bch->add_option("--config", config_path, "key=value config file");
    bch->add_option("--blocks", bench_blocks, "blocks to emit");
    bch->add_option("--seed", seed, "run seed");

    CLI::App* sch = app.add_subcommand("schedule", "print the per-ordinal timestep table");

    std::string suite = "all";
    CLI::App* ver = app.add_subcommand("verify", "run property suites");
    ver->add_option("suite", suite, "suite name or \"all\"");

    int toy_iters = DmdOptions{}.iterations;
    std::uint64_t toy_seed = 1;
    std::string toy_out;
    CLI::App* toy = app.add_subcommand("distill-toy", "2-D distribution matching distillation");
    toy->add_option("--iters", toy_iters, "generator updates");
    toy->add_option("--seed", toy_seed, "training seed");
    toy->add_option("--out", toy_out, "JSON report path");

    std::int64_t dump_blocks = 8;
    CLI::App* dmp = app.add_subcommand("cache-dump", "run a short stream, dump the cache state");
    dmp->add_option("--config", config_path, "key=value config file");
    dmp->add_option("--blocks", dump_blocks, "blocks to run before dumping");
    dmp->add_option("--seed", seed, "run seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        RunConfig config;
        if (!config_path.empty()) {
            config = load_run_config(config_path);
        }
        if (gen->count("--seed") || bch->count("--seed") || dmp->count("--seed")) {
            config.seed = seed;
        }
        if (gen->count("--blocks")) config.blocks = blocks;
        if (gen->count("--audio")) config.audio_path = audio_path;
        if (gen->count("--out")) config.out_path = out_path;
        if (gen->count("--events")) config.events_path = events_path;
        if (gen->count("--checkpoint")) config.checkpoint_path = checkpoint_path;

        if (gen->parsed()) {
            if (dump_config) {
                std::cout << dump_run_config(config);
                return 0;
            }
            return run_generate(std::move(config), synth_audio_flag);
        }
        if (bch->parsed()) {
            return run_bench(config, bench_blocks);
        }
        if (sch->parsed()) {
            std::cout << schedule_tsv();
            return 0;
        }
        if (ver->parsed()) {
            return run_verify(suite);
        }
        if (toy->parsed()) {
            return run_distill(toy_iters, toy_seed, toy_out);
        }
        if (dmp->parsed()) {
            return run_cache_dump(std::move(config), dump_blocks);
        }
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
