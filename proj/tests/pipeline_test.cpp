#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "streamdiff/errors.hpp"
#include "streamdiff/pipeline.hpp"

using namespace streamdiff;

namespace {

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

PipelineConfig small_config(std::int64_t target) {
    PipelineConfig cfg;
    cfg.model = small_model();
    cfg.target_blocks = target;
    return cfg;
}

// audio_frames == 0 leaves the bundle's audio empty for streamed-ingest runs.
ConditioningBundle make_bundle(const ModelConfig& m, Index audio_frames, std::uint64_t seed) {
    Rng master(seed);
    ConditioningBundle b;
    Rng id_rng = master.fork("identity");
    b.identity = randn(id_rng, {m.identity_dim});
    Rng ref_rng = master.fork("reference");
    b.reference = randn(ref_rng, {m.channels, m.grid_h, m.grid_w});
    if (audio_frames > 0) {
        b.audio = synth_audio(audio_frames, m.audio_dim, master.fork("audio").seed);
    }
    return b;
}

// Stock init zeroes the output head, which would freeze every prediction at
// the bias; a scaled random head lets noise and context reach the output.
DenoiserParams make_params(const ModelConfig& m, std::uint64_t seed) {
    Rng rng(seed);
    DenoiserParams params = DenoiserParams::init(m, rng);
    params.head_w = randn(rng, {m.width, m.channels});
    params.head_w.flat() *= 0.05f;
    params.head_b = randn(rng, {m.channels});
    params.head_b.flat() *= 0.05f;
    return params;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * sizeof(float)) == 0;
}

struct Emitted {
    std::int64_t ordinal;
    Tensor block;
};

std::vector<Emitted> capture_run(Pipeline& p, std::int64_t blocks) {
    std::vector<Emitted> out;
    p.on_emit([&](std::int64_t ordinal, const Tensor& t) { out.push_back({ordinal, t}); });
    p.run_until(blocks);
    return out;
}

}  // namespace

TEST_CASE("config validation rejects each bad field") {
    PipelineConfig cfg = small_config(4);
    CHECK_NOTHROW(cfg.validate());

    PipelineConfig bad = cfg;
    bad.sink_frames = 2;  // must equal frames_per_block
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.recent_frames = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.window_blocks = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.reset_threshold = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.target_blocks = -1;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("constructor validates bundle and parameters") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(2);

    // Parameters built for a different model.
    ModelConfig other = m;
    other.width       = 64;
    CHECK_THROWS_AS(Pipeline(cfg, make_bundle(m, 6, 1), make_params(other, 2), 3),
                    ConsistencyError);

    ConditioningBundle bad = make_bundle(m, 6, 1);
    Rng r1(9);
    bad.identity = randn(r1, {m.identity_dim + 1});
    CHECK_THROWS_AS(Pipeline(cfg, std::move(bad), make_params(m, 2), 3), InputError);

    bad = make_bundle(m, 6, 1);
    Rng r2(9);
    bad.reference = randn(r2, {m.channels, m.grid_h, m.grid_w + 1});
    CHECK_THROWS_AS(Pipeline(cfg, std::move(bad), make_params(m, 2), 3), InputError);

    bad = make_bundle(m, 6, 1);
    Rng r3(9);
    bad.audio = randn(r3, {4, m.audio_dim + 1});
    CHECK_THROWS_AS(Pipeline(cfg, std::move(bad), make_params(m, 2), 3), InputError);

    // A fresh pipeline has done nothing yet.
    Pipeline p(cfg, make_bundle(m, 6, 1), make_params(m, 2), 3);
    CHECK(p.pass_count() == 0);
    CHECK(p.emitted_blocks() == 0);
    CHECK(p.cache().frame_count() == 0);
    CHECK(p.resets() == 0);
    CHECK(p.audio_frames() == 6);
}

TEST_CASE("admission and emission cadence over a seven block run") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(7);
    Pipeline p(cfg, make_bundle(m, 21, 11), make_params(m, 12), 5);
    p.close_audio();

    std::vector<StreamEvent> events = p.run_until(7);

    std::vector<std::pair<std::int64_t, std::int64_t>> admitted;  // (pass, block)
    std::vector<std::pair<std::int64_t, std::int64_t>> emitted;
    std::vector<std::pair<std::int64_t, std::vector<FrameId>>> evicted;
    for (const StreamEvent& e : events) {
        if (e.kind == StreamEvent::Kind::admitted) admitted.emplace_back(e.pass, e.block);
        if (e.kind == StreamEvent::Kind::emitted) emitted.emplace_back(e.pass, e.block);
        if (e.kind == StreamEvent::Kind::evicted) evicted.emplace_back(e.pass, e.frames);
        CHECK(e.kind != StreamEvent::Kind::reset);
    }

    // Staggered bootstrap admissions, then admit on vacancy.
    const std::vector<std::pair<std::int64_t, std::int64_t>> want_admitted = {
        {1, 1}, {3, 2}, {5, 3}, {7, 4}, {9, 5}, {10, 6}, {11, 7}};
    CHECK(admitted == want_admitted);

    // Every block lands exactly seven passes after its admission would in a
    // non-bootstrapped stream: block b at pass b + 7.
    REQUIRE(emitted.size() == 7);
    for (std::int64_t b = 1; b <= 7; ++b) {
        CHECK(emitted[static_cast<size_t>(b - 1)] ==
              std::pair<std::int64_t, std::int64_t>{b + 7, b});
    }
    CHECK(p.pass_count() == 14);
    CHECK(p.emitted_blocks() == 7);

    // Cache fills to 15 frames at block 5, then evicts one block per commit.
    // The first block is pinned, so block 2's frames leave first.
    REQUIRE(evicted.size() == 2);
    CHECK(evicted[0].first == 13);
    CHECK(evicted[0].second == std::vector<FrameId>{3, 4, 5});
    CHECK(evicted[1].first == 14);
    CHECK(evicted[1].second == std::vector<FrameId>{6, 7, 8});
    CHECK(p.cache().frame_count() == 15);

    // Emitted frame ids are consecutive.
    for (const StreamEvent& e : events) {
        if (e.kind != StreamEvent::Kind::emitted) continue;
        const FrameId base = (e.block - 1) * m.frames_per_block;
        CHECK(e.frames == std::vector<FrameId>{base, base + 1, base + 2});
    }
}

TEST_CASE("per pass noise levels walk the staggered schedule") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(7);
    Pipeline p(cfg, make_bundle(m, 21, 11), make_params(m, 12), 5);
    p.close_audio();

    std::map<std::int64_t, std::vector<std::pair<std::int64_t, int>>> by_pass;
    for (const StreamEvent& e : p.run_until(7)) {
        if (e.kind == StreamEvent::Kind::denoised) by_pass[e.pass] = e.timesteps;
    }

    using Ts = std::vector<std::pair<std::int64_t, int>>;
    CHECK(by_pass.at(1) == Ts{{1, 1000}});
    CHECK(by_pass.at(2) == Ts{{1, 875}});
    CHECK(by_pass.at(3) == Ts{{1, 750}, {2, 1000}});
    CHECK(by_pass.at(8) == Ts{{1, 125}, {2, 375}, {3, 625}, {4, 875}});
    // Steady state: front to back the window sits at 250/500/750/1000.
    CHECK(by_pass.at(9) == Ts{{2, 250}, {3, 500}, {4, 750}, {5, 1000}});
    CHECK(by_pass.at(10) == Ts{{3, 250}, {4, 500}, {5, 750}, {6, 1000}});
    CHECK(by_pass.at(11) == Ts{{4, 250}, {5, 500}, {6, 750}, {7, 1000}});
    // Drain: no admissions past the target.
    CHECK(by_pass.at(12) == Ts{{5, 250}, {6, 500}, {7, 750}});
    CHECK(by_pass.at(14) == Ts{{7, 250}});
}

TEST_CASE("events are ordered and serialize to parseable json") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(6);
    Pipeline p(cfg, make_bundle(m, 18, 4), make_params(m, 6), 19);
    p.close_audio();
    std::vector<StreamEvent> events = p.run_until(6);

    auto priority = [](StreamEvent::Kind k) {
        switch (k) {
            case StreamEvent::Kind::admitted: return 0;
            case StreamEvent::Kind::denoised: return 1;
            case StreamEvent::Kind::emitted: return 2;
            case StreamEvent::Kind::evicted: return 3;
            case StreamEvent::Kind::reset: return 4;
        }
        return 5;
    };

    std::int64_t last_pass = 0;
    int last_priority      = -1;
    int denoised_count     = 0;
    for (const StreamEvent& e : events) {
        REQUIRE(e.pass >= last_pass);
        if (e.pass > last_pass) last_priority = -1;
        CHECK(priority(e.kind) >= last_priority);
        last_priority = priority(e.kind);
        last_pass     = e.pass;
        if (e.kind == StreamEvent::Kind::denoised) ++denoised_count;

        const nlohmann::json j = nlohmann::json::parse(event_to_json(e));
        CHECK(j.at("kind").get<std::string>() == event_kind_name(e.kind));
        CHECK(j.at("pass").get<std::int64_t>() == e.pass);
        if (e.kind == StreamEvent::Kind::denoised) {
            CHECK(j.at("timesteps").size() == e.timesteps.size());
            CHECK(j.at("condition_eps").size() == static_cast<size_t>(m.frame_elems()));
            CHECK(j.at("condition_x").size() == static_cast<size_t>(m.frame_elems()));
            CHECK(j.contains("epoch"));
            CHECK(j.contains("offset"));
            CHECK(j.contains("window_start"));
        }
    }
    // One joint denoiser forward per pass while anything is in flight.
    CHECK(denoised_count == p.pass_count());
}

TEST_CASE("same seed reproduces the stream bit for bit") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(3);

    Pipeline a(cfg, make_bundle(m, 9, 21), make_params(m, 22), 77);
    a.close_audio();
    std::vector<Emitted> got_a = capture_run(a, 3);

    Pipeline b(cfg, make_bundle(m, 9, 21), make_params(m, 22), 77);
    b.close_audio();
    std::vector<Emitted> got_b;
    b.on_emit([&](std::int64_t ordinal, const Tensor& t) { got_b.push_back({ordinal, t}); });
    while (b.emitted_blocks() < 3) b.run_pass();  // different drive pattern, same stream

    REQUIRE(got_a.size() == 3);
    REQUIRE(got_b.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(got_a[i].ordinal == got_b[i].ordinal);
        CHECK(got_a[i].block.dim(0) == m.frames_per_block);
        CHECK(bit_equal(got_a[i].block, got_b[i].block));
        CHECK(got_a[i].block.all_finite());
    }

    // A different seed moves the output.
    Pipeline c(cfg, make_bundle(m, 9, 21), make_params(m, 22), 78);
    c.close_audio();
    std::vector<Emitted> got_c = capture_run(c, 3);
    CHECK_FALSE(bit_equal(got_a[0].block, got_c[0].block));
}

TEST_CASE("audio ingest while running matches upfront audio") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(4);
    const Tensor audio  = synth_audio(12, m.audio_dim, 99);

    ConditioningBundle upfront = make_bundle(m, 0, 31);
    upfront.audio              = audio;
    Pipeline base(cfg, std::move(upfront), make_params(m, 32), 40);
    std::vector<Emitted> want = capture_run(base, 4);

    Pipeline streamed(cfg, make_bundle(m, 0, 31), make_params(m, 32), 40);
    CHECK(streamed.audio_frames() == 0);
    std::thread feeder([&] {
        for (Index row = 0; row < 12; row += 3) {
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
            std::vector<float> chunk(audio.data() + row * m.audio_dim,
                                     audio.data() + (row + 3) * m.audio_dim);
            streamed.append_audio(Tensor({3, m.audio_dim}, chunk));
        }
        streamed.close_audio();
    });
    std::vector<Emitted> got = capture_run(streamed, 4);
    feeder.join();

    REQUIRE(want.size() == 4);
    REQUIRE(got.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(got[i].ordinal == want[i].ordinal);
        CHECK(bit_equal(got[i].block, want[i].block));
    }
    CHECK(streamed.audio_frames() == 12);
    CHECK_THROWS_AS(streamed.append_audio(Tensor({1, m.audio_dim})), InputError);
}

TEST_CASE("a closed feed without enough audio fails the pass that needs it") {
    const ModelConfig m = small_model();

    Pipeline empty(small_config(2), make_bundle(m, 0, 8), make_params(m, 9), 2);
    empty.close_audio();
    CHECK_THROWS_AS(empty.run_pass(), InputError);

    Pipeline three(small_config(2), make_bundle(m, 3, 8), make_params(m, 9), 2);
    three.close_audio();
    CHECK_THROWS_WITH_AS(three.run_until(2),
                         doctest::Contains("audio features end at frame 3"), InputError);
}

TEST_CASE("run_until respects the configured target") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(2);
    Pipeline p(cfg, make_bundle(m, 6, 13), make_params(m, 14), 8);
    p.close_audio();

    CHECK_THROWS_AS(p.run_until(3), ArgumentError);

    // Exactly the target's worth of audio completes the run.
    p.run_until(2);
    CHECK(p.emitted_blocks() == 2);
    CHECK(p.pass_count() == 9);

    // Past the target the pipeline idles instead of admitting.
    const auto idle = p.run_pass();
    CHECK(idle.empty());
}

TEST_CASE("index resets keep temporal indices bounded on a long run") {
    const ModelConfig m     = small_model();
    PipelineConfig cfg      = small_config(60);
    cfg.reset_threshold     = 30;
    Pipeline p(cfg, make_bundle(m, 180, 51), make_params(m, 52), 60);
    p.close_audio();

    std::vector<StreamEvent> events = p.run_until(60);
    CHECK(p.emitted_blocks() == 60);
    CHECK(p.resets() >= 2);
    CHECK(p.max_index_seen() <= cfg.reset_threshold + 28);
    CHECK(p.index_state().epoch == p.resets());
    CHECK(p.cache().frame_count() == 15);

    // Reset events carry the window start that tripped the threshold.
    std::int64_t reset_count = 0;
    for (const StreamEvent& e : events) {
        if (e.kind != StreamEvent::Kind::reset) continue;
        ++reset_count;
        CHECK(e.window_start_index > cfg.reset_threshold);
        CHECK(e.offset > 0);
    }
    CHECK(reset_count == p.resets());
}

TEST_CASE("bench reports the fixed pass overhead and flat cache") {
    PipelineConfig cfg = small_config(0);

    BenchReport r100 = bench(cfg, 100, 7);
    BenchReport r200 = bench(cfg, 200, 7);
    CHECK(r100.blocks_emitted == 100);
    CHECK(r100.frames_emitted == 300);
    CHECK(r100.forwards == 107);
    CHECK(r200.forwards == 207);
    CHECK(r200.forwards - r100.forwards == 100);
    CHECK(r100.cache_frames_peak == 15);
    CHECK(r200.cache_frames_peak == 15);
    CHECK(r100.cache_constant_after_fill);
    CHECK(r200.cache_constant_after_fill);
    CHECK(r100.resets >= 1);
    CHECK(r200.resets > r100.resets);
    CHECK(r100.frames_per_second > 0.0);

    BenchReport r0 = bench(cfg, 0, 7);
    CHECK(r0.passes == 0);
    CHECK(r0.frames_emitted == 0);
    CHECK(r0.cache_frames_final == 0);
    CHECK_THROWS_AS(bench(cfg, -1, 7), ArgumentError);
}

TEST_CASE("history records each block's final denoising state") {
    const ModelConfig m = small_model();
    Pipeline p(small_config(2), make_bundle(m, 6, 61), make_params(m, 62), 9);
    p.close_audio();
    p.record_history(true);
    p.run_until(2);

    const std::vector<BlockHistory>& h = p.history();
    REQUIRE(h.size() == 2);
    CHECK(h[0].ordinal == 1);
    CHECK(h[1].ordinal == 2);
    CHECK(h[0].frame_ids == std::vector<FrameId>{0, 1, 2});
    CHECK(h[1].frame_ids == std::vector<FrameId>{3, 4, 5});
    CHECK(h[0].final_t == 125);  // the bootstrap queue's last entry
    CHECK(h[1].final_t == 250);
    CHECK(h[0].final_input.dim(0) == m.frames_per_block);
    CHECK(h[0].t_indices.size() == 3);
    CHECK(h[0].cond_source == kReferenceFrame);
    CHECK(h[1].cond_source == 2);  // last frame of block 1
}

TEST_CASE("cached attention matches full recomputation") {
    const ModelConfig m = small_model();
    PipelineConfig cfg  = small_config(3);

    Pipeline cached(cfg, make_bundle(m, 9, 71), make_params(m, 72), 33, Pipeline::Mode::Cached);
    cached.close_audio();
    std::vector<Emitted> got_cached = capture_run(cached, 3);

    Pipeline recomputed(cfg, make_bundle(m, 9, 71), make_params(m, 72), 33,
                        Pipeline::Mode::Recompute);
    recomputed.close_audio();
    std::vector<Emitted> got_recomputed = capture_run(recomputed, 3);

    REQUIRE(got_cached.size() == 3);
    REQUIRE(got_recomputed.size() == 3);
    double worst = 0.0;
    for (size_t i = 0; i < 3; ++i) {
        CHECK(got_cached[i].ordinal == got_recomputed[i].ordinal);
        const Tensor& a = got_cached[i].block;
        const Tensor& b = got_recomputed[i].block;
        REQUIRE(a.size() == b.size());
        for (Index k = 0; k < a.size(); ++k) {
            worst = std::max(worst, static_cast<double>(
                                        std::fabs(a.data()[k] - b.data()[k])));
        }
    }
    CHECK(worst <= 1e-4);
    // Block 1 has no committed context yet, so the two paths agree exactly.
    CHECK(bit_equal(got_cached[0].block, got_recomputed[0].block));
}
