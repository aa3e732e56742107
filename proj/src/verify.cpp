#include "streamdiff/verify.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "streamdiff/config.hpp"
#include "streamdiff/diffusion.hpp"
#include "streamdiff/dmd.hpp"
#include "streamdiff/errors.hpp"
#include "streamdiff/formats.hpp"
#include "streamdiff/pipeline.hpp"

namespace streamdiff {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

struct Setup {
    PipelineConfig config;
    ConditioningBundle bundle;
    DenoiserParams params;
};

// Default model with a non-degenerate output head; the stock initialization
// keeps the head at zero, which would make every prediction a constant.
Setup make_setup(std::uint64_t seed, std::int64_t blocks) {
    Setup s;
    s.config.target_blocks = blocks;
    const ModelConfig& m   = s.config.model;

    Rng master(seed);
    Rng id_rng         = master.fork("identity");
    s.bundle.identity  = randn(id_rng, {m.identity_dim});
    Rng ref_rng        = master.fork("reference");
    s.bundle.reference = randn(ref_rng, {m.channels, m.grid_h, m.grid_w});
    s.bundle.audio = synth_audio(blocks * m.frames_per_block, m.audio_dim,
                                 master.fork("audio").seed);

    Rng param_rng = master.fork("params");
    s.params      = DenoiserParams::init(m, param_rng);
    Rng head_rng  = master.fork("head");
    s.params.head_w = randn(head_rng, {m.width, m.channels});
    s.params.head_w.flat() *= 0.05f;
    s.params.head_b = randn(head_rng, {m.channels});
    s.params.head_b.flat() *= 0.05f;
    return s;
}

// Single-head attention over already-rotated rows.
RowMatrixXf attend(const RowMatrixXf& q, const RowMatrixXf& k, const RowMatrixXf& v) {
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(q.cols()));
    RowMatrixXf scores   = q * k.transpose() * inv_sqrt;
    Tensor sm({scores.rows(), scores.cols()},
              std::vector<float>(scores.data(), scores.data() + scores.size()));
    sm = softmax_lastdim(sm);
    return sm.mat(scores.rows(), scores.cols()) * v;
}

Index vm_rss_bytes() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("VmRSS:", 0) == 0) {
            std::istringstream is(line.substr(6));
            Index kb = 0;
            is >> kb;
            return kb * 1024;
        }
    }
    return 0;
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// 1. Bootstrap schedule is exactly the published table.
// ---------------------------------------------------------------------------

CheckResult check_schedule() {
    CheckResult r;
    r.name = "schedule";
    const std::string expected =
        "1\t1000\t875\t750\t625\t500\t375\t250\t125\n"
        "2\t1000\t875\t750\t625\t500\t375\t250\n"
        "3\t1000\t875\t750\t625\t500\t250\n"
        "4\t1000\t875\t750\t500\t250\n"
        "5\t1000\t750\t500\t250\n";
    const std::string got = schedule_tsv();
    if (got != expected) {
        r.detail = "TSV mismatch";
        return r;
    }
    const std::array<std::size_t, 5> counts{8, 7, 6, 5, 4};
    for (std::int64_t ordinal = 1; ordinal <= 5; ++ordinal) {
        const TimestepQueue q = build_queue(ordinal);
        if (q.remaining.size() != counts[static_cast<std::size_t>(ordinal - 1)]) {
            r.detail = "ordinal " + std::to_string(ordinal) + " has wrong step count";
            return r;
        }
        for (int main : kMainSteps) {
            if (std::find(q.remaining.begin(), q.remaining.end(), main) == q.remaining.end()) {
                r.detail = "ordinal " + std::to_string(ordinal) + " misses main step " +
                           std::to_string(main);
                return r;
            }
        }
    }
    r.passed = true;
    r.detail = "exact TSV match, counts 8/7/6/5/4";
    return r;
}

// ---------------------------------------------------------------------------
// 2. Attention is invariant to shifting every temporal index by a constant.
// ---------------------------------------------------------------------------

CheckResult check_rotary_shift() {
    CheckResult r;
    r.name = "rotary-shift";
    const int hd          = 16;
    const Index spatial   = 4;
    const Index frames    = 6;
    const RopeTable table = RopeTable::make(hd);
    const std::vector<std::pair<int, int>> hw{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    const std::array<std::int64_t, 3> deltas{1, 5, 100};

    Rng rng(0x526F5065);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor q = randn(rng, {spatial, hd});
        Tensor k = randn(rng, {frames * spatial, hd});
        Tensor v = randn(rng, {frames * spatial, hd});

        auto run = [&](std::int64_t shift) {
            Tensor qr = q, kr = k;
            rope_rows(qr.mat(spatial, hd), frames + shift, hw, table);
            for (Index f = 0; f < frames; ++f) {
                rope_rows(MatMap(kr.data() + f * spatial * hd, spatial, hd), f + shift, hw,
                          table);
            }
            return attend(qr.mat(spatial, hd), kr.mat(frames * spatial, hd),
                          v.mat(frames * spatial, hd));
        };

        const RowMatrixXf base = run(0);
        for (std::int64_t d : deltas) {
            const RowMatrixXf shifted = run(d);
            worst = std::max(worst, static_cast<double>((base - shifted).cwiseAbs().maxCoeff()));
        }
    }
    r.passed = worst <= 1e-5;
    r.detail = "max |diff| " + fmt(worst) + " over 100 trials, shifts {1,5,100}";
    return r;
}

// ---------------------------------------------------------------------------
// 3. Pre-rotary storage: retrieval-time rotation is bit-equal to write-time
//    rotation, and a rebased epoch leaves attention unchanged.
// ---------------------------------------------------------------------------

CheckResult check_urcr() {
    CheckResult r;
    r.name = "urcr";
    const int heads = 2, hd = 16;
    const Index gh = 2, gw = 2, spatial = gh * gw;
    const RopeTable table = RopeTable::make(hd);
    std::vector<std::pair<int, int>> hw;
    for (Index h = 0; h < gh; ++h) {
        for (Index w = 0; w < gw; ++w) hw.emplace_back(static_cast<int>(h), static_cast<int>(w));
    }
    Rng rng(0x55524352);

    // Part A: commit with sinks, retrieve, compare against rotating an
    // independently kept copy of the raw keys at the same indices.
    {
        KvCache cache(1, 3, 12, gh, gw);
        std::vector<CacheEntry> kept;
        for (FrameId id = 0; id < 12; id += 3) {
            std::vector<std::vector<CacheEntry>> block(1);
            for (FrameId f = id; f < id + 3; ++f) {
                CacheEntry e;
                e.frame_id = f;
                e.k_raw    = randn(rng, {spatial, heads, hd});
                e.v        = randn(rng, {spatial, heads, hd});
                kept.push_back(e);
                block[0].push_back(std::move(e));
            }
            cache.commit_block(block);
        }
        const std::vector<FrameId> window{12, 13, 14};
        IndexAssignment asg = assign_indices(cache.layout(), window, kReferenceFrame, {});
        RetrievedKv rk      = cache.retrieve(0, asg, table);

        Tensor expect_k({static_cast<Index>(kept.size()) * spatial, heads, hd});
        Tensor expect_v(expect_k.shape());
        const auto tags = cache.layout();
        for (std::size_t f = 0; f < tags.size(); ++f) {
            const CacheEntry& src = kept[static_cast<std::size_t>(tags[f].id)];
            float* kd             = expect_k.data() + static_cast<Index>(f) * spatial * heads * hd;
            std::memcpy(kd, src.k_raw.data(),
                        static_cast<std::size_t>(spatial * heads * hd) * sizeof(float));
            std::memcpy(expect_v.data() + static_cast<Index>(f) * spatial * heads * hd,
                        src.v.data(),
                        static_cast<std::size_t>(spatial * heads * hd) * sizeof(float));
            for (int head = 0; head < heads; ++head) {
                rope_strided(kd + head * hd, spatial, heads * hd, asg.index_of(tags[f].id), hw,
                             table);
            }
        }
        if (rk.k_roped.size() != expect_k.size() ||
            std::memcmp(rk.k_roped.data(), expect_k.data(),
                        static_cast<std::size_t>(expect_k.size()) * sizeof(float)) != 0 ||
            std::memcmp(rk.v.data(), expect_v.data(),
                        static_cast<std::size_t>(expect_v.size()) * sizeof(float)) != 0) {
            r.detail = "retrieval is not bit-equal to write-time rotation";
            return r;
        }
    }

    // Part B: rebasing all retained indices and the query by one constant
    // leaves attention outputs unchanged. Runs sink-free; pinned sinks keep
    // absolute indices by design, so only the shifted region can be compared.
    double worst = 0.0;
    {
        KvCache cache(1, 0, 12, gh, gw);
        for (FrameId id = 0; id < 24; id += 3) {
            std::vector<std::vector<CacheEntry>> block(1);
            for (FrameId f = id; f < id + 3; ++f) {
                CacheEntry e;
                e.frame_id = f;
                e.k_raw    = randn(rng, {spatial, heads, hd});
                e.v        = randn(rng, {spatial, heads, hd});
                block[0].push_back(std::move(e));
            }
            cache.commit_block(block);
        }
        // Recent region now holds ids 12..23.
        IndexAssignment before, after;
        for (FrameId id = 12; id < 24; ++id) {
            before.recent_ids.push_back(id);
            after.recent_ids.push_back(id);
        }
        before.offset = 0;   // indices 12..23, query at 24
        after.offset  = 12;  // indices 0..11, query at 12
        after.epoch   = 1;

        Tensor q = randn(rng, {spatial, heads, hd});
        auto attend_at = [&](const IndexAssignment& asg, std::int64_t q_index) {
            RetrievedKv rk = cache.retrieve(0, asg, table);
            Tensor qr      = q;
            const Index n  = rk.k_roped.dim(0);
            RowMatrixXf out(spatial * heads, hd);
            for (int head = 0; head < heads; ++head) {
                rope_strided(qr.data() + head * hd, spatial, heads * hd, q_index, hw, table);
                RowMatrixXf qh(spatial, hd), kh(n, hd), vh(n, hd);
                for (Index s = 0; s < spatial; ++s) {
                    qh.row(s) = ConstMatMap(qr.data() + s * heads * hd + head * hd, 1, hd);
                }
                for (Index i = 0; i < n; ++i) {
                    kh.row(i) = ConstMatMap(rk.k_roped.data() + i * heads * hd + head * hd, 1, hd);
                    vh.row(i) = ConstMatMap(rk.v.data() + i * heads * hd + head * hd, 1, hd);
                }
                out.middleRows(head * spatial, spatial) = attend(qh, kh, vh);
            }
            return out;
        };
        const RowMatrixXf a = attend_at(before, 24);
        const RowMatrixXf b = attend_at(after, 12);
        worst               = static_cast<double>((a - b).cwiseAbs().maxCoeff());
        if (worst > 1e-5) {
            r.detail = "rebased attention differs by " + fmt(worst);
            return r;
        }
    }

    r.passed = true;
    r.detail = "bit-equal retrieval; rebase max |diff| " + fmt(worst);
    return r;
}

// ---------------------------------------------------------------------------
// 4. Five blocks generated with the cache match a full in-context
//    recomputation of every pass.
// ---------------------------------------------------------------------------

CheckResult check_recompute() {
    CheckResult r;
    r.name = "recompute";
    const std::uint64_t seed = 41;
    const std::int64_t blocks = 5;

    auto run = [&](Pipeline::Mode mode) {
        Setup s = make_setup(seed, blocks);
        Pipeline p(s.config, std::move(s.bundle), std::move(s.params), seed, mode);
        std::map<std::int64_t, Tensor> emitted;
        p.on_emit([&](std::int64_t ordinal, const Tensor& block) { emitted[ordinal] = block; });
        p.close_audio();
        p.run_until(blocks);
        return emitted;
    };

    const auto cached     = run(Pipeline::Mode::Cached);
    const auto recomputed = run(Pipeline::Mode::Recompute);
    if (cached.size() != static_cast<std::size_t>(blocks) || recomputed.size() != cached.size()) {
        r.detail = "emission counts differ";
        return r;
    }
    double worst = 0.0;
    for (const auto& [ordinal, a] : cached) {
        const Tensor& b = recomputed.at(ordinal);
        for (Index i = 0; i < a.size(); ++i) {
            worst = std::max(worst, static_cast<double>(std::fabs(a[i] - b[i])));
        }
    }
    r.passed = worst <= 1e-4;
    r.detail = "max |cached - recomputed| " + fmt(worst) + " over " + std::to_string(blocks) +
               " blocks";
    return r;
}

// ---------------------------------------------------------------------------
// 5. 500 blocks stream in bounded memory with bounded temporal indices.
// ---------------------------------------------------------------------------

CheckResult check_unbounded() {
    CheckResult r;
    r.name = "unbounded";
    const std::int64_t blocks = 500;
    Setup s = make_setup(17, blocks);

    const auto path =
        (std::filesystem::temp_directory_path() / "streamdiff-unbounded.javl").string();
    const ModelConfig& m = s.config.model;

    Pipeline p(s.config, std::move(s.bundle), std::move(s.params), 17);
    JavlWriter writer(path, m.channels, m.grid_h, m.grid_w, m.frames_per_block);
    p.on_emit([&](std::int64_t, const Tensor& block) {
        for (int f = 0; f < m.frames_per_block; ++f) {
            writer.write_frame(Tensor({m.channels, m.grid_h, m.grid_w},
                                      std::vector<float>(block.data() + f * m.frame_elems(),
                                                         block.data() + (f + 1) * m.frame_elems())));
        }
    });
    p.close_audio();

    const Index fill = s.config.sink_frames + s.config.recent_frames;
    bool filled = false, cache_constant = true;
    Index rss_mid = 0;
    while (p.emitted_blocks() < blocks) {
        p.run_pass();
        const Index count = p.cache().frame_count();
        if (filled && count != fill) cache_constant = false;
        if (count == fill) filled = true;
        if (rss_mid == 0 && p.emitted_blocks() >= 100) rss_mid = vm_rss_bytes();
    }
    writer.close();
    const Index rss_end = vm_rss_bytes();

    const auto file_bytes = static_cast<Index>(std::filesystem::file_size(path));
    std::filesystem::remove(path);
    const Index growth = std::max<Index>(0, rss_end - rss_mid);

    const bool index_ok  = p.max_index_seen() <= 128;
    const bool emitted   = p.emitted_blocks() == blocks;
    const bool memory_ok = growth <= file_bytes;
    r.passed = emitted && index_ok && filled && cache_constant && memory_ok && p.resets() > 0;
    r.detail = "max index " + std::to_string(p.max_index_seen()) + ", resets " +
               std::to_string(p.resets()) + ", cache " + (cache_constant ? "constant" : "VARIED") +
               ", rss growth " + std::to_string(growth) + " B vs output " +
               std::to_string(file_bytes) + " B";
    return r;
}

// ---------------------------------------------------------------------------
// 6. Emission cadence and per-block denoiser touch counts.
// ---------------------------------------------------------------------------

CheckResult check_cadence() {
    CheckResult r;
    r.name = "cadence";
    const std::int64_t blocks = 12;
    Setup s = make_setup(23, blocks);
    Pipeline p(s.config, std::move(s.bundle), std::move(s.params), 23);
    p.close_audio();
    const auto events = p.run_until(blocks);

    std::map<std::int64_t, std::int64_t> emitted_at;
    std::map<std::int64_t, int> touches;
    std::map<std::int64_t, int> emissions_per_pass;
    for (const StreamEvent& e : events) {
        if (e.kind == StreamEvent::Kind::emitted) {
            emitted_at[e.block] = e.pass;
            ++emissions_per_pass[e.pass];
        }
        if (e.kind == StreamEvent::Kind::denoised) {
            for (const auto& [ordinal, t] : e.timesteps) ++touches[ordinal];
        }
    }
    for (std::int64_t b = 1; b <= blocks; ++b) {
        if (emitted_at[b] != b + 7) {
            r.detail = "block " + std::to_string(b) + " emitted at pass " +
                       std::to_string(emitted_at[b]) + ", expected " + std::to_string(b + 7);
            return r;
        }
    }
    for (const auto& [pass, count] : emissions_per_pass) {
        if (count != 1) {
            r.detail = "pass " + std::to_string(pass) + " emitted " + std::to_string(count) +
                       " blocks";
            return r;
        }
    }
    const std::array<int, 4> bootstrap{8, 7, 6, 5};
    for (std::int64_t b = 1; b <= blocks; ++b) {
        const int want = b <= 4 ? bootstrap[static_cast<std::size_t>(b - 1)] : 4;
        if (touches[b] != want) {
            r.detail = "block " + std::to_string(b) + " denoised " + std::to_string(touches[b]) +
                       " times, expected " + std::to_string(want);
            return r;
        }
    }
    r.passed = true;
    r.detail = "blocks 1-5 at passes 8-12, one per pass after, 4 touches from block 5";
    return r;
}

// ---------------------------------------------------------------------------
// 7. Logged condition frames reconstruct exactly from the logged noise.
// ---------------------------------------------------------------------------

CheckResult check_mci_noise() {
    CheckResult r;
    r.name = "mci-noise";
    const std::int64_t blocks = 6;
    Setup s = make_setup(29, blocks);
    const Tensor reference = s.bundle.reference;
    const ModelConfig& m   = s.config.model;

    Pipeline p(s.config, std::move(s.bundle), std::move(s.params), 29);
    std::map<FrameId, std::vector<float>> frames_by_id;
    p.on_emit([&](std::int64_t ordinal, const Tensor& block) {
        for (int f = 0; f < m.frames_per_block; ++f) {
            const FrameId id = (ordinal - 1) * m.frames_per_block + f;
            frames_by_id[id] = std::vector<float>(block.data() + f * m.frame_elems(),
                                                  block.data() + (f + 1) * m.frame_elems());
        }
    });
    p.close_audio();
    const auto events = p.run_until(blocks);

    int checked = 0;
    for (const StreamEvent& e : events) {
        if (e.kind != StreamEvent::Kind::denoised) continue;
        const float* prev = e.condition_source == kReferenceFrame
                                ? reference.data()
                                : frames_by_id.at(e.condition_source).data();
        const float sg = sigma_of(e.condition_t);
        for (std::size_t i = 0; i < e.condition_x.size(); ++i) {
            const float expected = e.condition_t == 0 ? prev[i]
                                   : e.condition_t == kMaxTimestep
                                       ? e.condition_eps[i]
                                       : (1.0f - sg) * prev[i] + sg * e.condition_eps[i];
            if (expected != e.condition_x[i]) {
                r.detail = "pass " + std::to_string(e.pass) + " condition differs at element " +
                           std::to_string(i);
                return r;
            }
        }
        ++checked;
    }
    r.passed = checked > 0;
    r.detail = "exact reconstruction over " + std::to_string(checked) + " passes";
    return r;
}

// ---------------------------------------------------------------------------
// 8. Perturbing a window block never changes earlier blocks' predictions.
// ---------------------------------------------------------------------------

CheckResult check_causality() {
    CheckResult r;
    r.name = "causality";
    Setup s = make_setup(31, 4);
    const ModelConfig& m = s.config.model;
    const int fpb        = m.frames_per_block;
    const Index fw       = 4 * fpb;
    const RopeTable table = RopeTable::make(m.head_dim());
    KvCache cache(m.layers, s.config.sink_frames, s.config.recent_frames, m.grid_h, m.grid_w);

    std::vector<FrameId> ids;
    for (FrameId f = 0; f < fw; ++f) ids.push_back(f);
    const std::vector<int> window_t{1000, 1000, 1000, 875, 875, 875,
                                    750,  750,  750,  625, 625, 625};

    Rng rng(0xCA05A1);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        IndexAssignment asg = assign_indices(cache.layout(), ids, kReferenceFrame, {});
        Tensor latents      = randn(rng, {fw, m.channels, m.grid_h, m.grid_w});
        Tensor cond         = randn(rng, {m.channels, m.grid_h, m.grid_w});

        ForwardResult base = forward(latents, window_t, cond, window_t.front(), cache, asg, table,
                                     s.bundle, s.params);

        const int j = 1 + trial % 3;  // perturbed block, zero-based
        Tensor bumped = latents;
        Rng noise_rng = rng.fork(static_cast<std::uint64_t>(trial));
        Tensor bump   = randn(noise_rng, {static_cast<Index>(fpb), m.channels, m.grid_h, m.grid_w});
        for (Index i = 0; i < bump.size(); ++i) {
            bumped[j * fpb * m.frame_elems() + i] += bump[i];
        }
        ForwardResult out = forward(bumped, window_t, cond, window_t.front(), cache, asg, table,
                                    s.bundle, s.params);

        for (Index i = 0; i < static_cast<Index>(j) * fpb * m.frame_elems(); ++i) {
            worst = std::max(worst, static_cast<double>(std::fabs(base.x0[i] - out.x0[i])));
        }
    }
    r.passed = worst <= 1e-6;
    r.detail = "max upstream |diff| " + fmt(worst) + " over 20 trials";
    return r;
}

// ---------------------------------------------------------------------------
// 9. Distillation: gradient check, KL halving, exact update ratio.
// ---------------------------------------------------------------------------

CheckResult check_dmd() {
    CheckResult r;
    r.name = "dmd";
    Rng rng(0xD34D);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 2500, rng);

    // Finite differences of the frozen-direction surrogate.
    ToyGenerator gen = ToyGenerator::init(32, rng);
    ToyScoreNet fake = ToyScoreNet::init(32, rng);
    std::vector<Point> eps(16);
    for (Point& e : eps) {
        e = {static_cast<double>(rng.next_normal()), static_cast<double>(rng.next_normal())};
    }
    Rng t_rng(0x7173);
    const DmdGrad g = dmd_generator_grad(gen, teacher, fake, eps, t_rng);

    double worst_rel = 0.0;
    const double h   = 1e-5;
    for (int probe = 0; probe < 20; ++probe) {
        std::vector<double> u(g.grad.size());
        double norm = 0.0;
        for (double& x : u) {
            x = static_cast<double>(rng.next_normal());
            norm += x * x;
        }
        norm = std::sqrt(norm);
        double analytic = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            u[i] /= norm;
            analytic += g.grad[i] * u[i];
        }
        ToyGenerator plus = gen, minus = gen;
        for (std::size_t i = 0; i < u.size(); ++i) {
            plus.net.params[i] += h * u[i];
            minus.net.params[i] -= h * u[i];
        }
        const double fd =
            (surrogate_value(plus, eps, g.d) - surrogate_value(minus, eps, g.d)) / (2.0 * h);
        const double rel = std::fabs(fd - analytic) / std::max({std::fabs(fd), std::fabs(analytic), 1e-12});
        worst_rel = std::max(worst_rel, rel);
    }
    if (worst_rel > 1e-3) {
        r.detail = "gradient check worst relative error " + fmt(worst_rel);
        return r;
    }

    DmdOptions options;
    options.seed = 7;
    const DmdReport report = train_dmd(teacher, options);
    const bool ratio_ok = report.fake_updates * 5 == report.generator_updates;
    const bool kl_ok    = report.kl_final <= 0.5 * report.kl_initial;
    r.passed = ratio_ok && kl_ok;
    r.detail = "gradcheck rel " + fmt(worst_rel) + "; KL " + fmt(report.kl_initial) + " -> " +
               fmt(report.kl_final) + "; updates " + std::to_string(report.generator_updates) +
               ":" + std::to_string(report.fake_updates);
    return r;
}

// ---------------------------------------------------------------------------
// 10. Identical seed, config, and audio produce bit-identical output files.
// ---------------------------------------------------------------------------

CheckResult check_determinism() {
    CheckResult r;
    r.name = "determinism";
    const std::int64_t blocks = 8;
    const auto dir = std::filesystem::temp_directory_path();

    auto run_once = [&](const std::string& path) {
        Setup s = make_setup(53, blocks);
        const ModelConfig& m = s.config.model;
        Pipeline p(s.config, std::move(s.bundle), std::move(s.params), 53);
        JavlWriter writer(path, m.channels, m.grid_h, m.grid_w, m.frames_per_block);
        p.on_emit([&](std::int64_t, const Tensor& block) {
            for (int f = 0; f < m.frames_per_block; ++f) {
                writer.write_frame(
                    Tensor({m.channels, m.grid_h, m.grid_w},
                           std::vector<float>(block.data() + f * m.frame_elems(),
                                              block.data() + (f + 1) * m.frame_elems())));
            }
        });
        p.close_audio();
        p.run_until(blocks);
        writer.close();
    };

    const std::string a = (dir / "streamdiff-det-a.javl").string();
    const std::string b = (dir / "streamdiff-det-b.javl").string();
    run_once(a);
    run_once(b);
    const std::string bytes_a = read_bytes(a);
    const std::string bytes_b = read_bytes(b);
    std::filesystem::remove(a);
    std::filesystem::remove(b);

    char checksum[32];
    std::snprintf(checksum, sizeof(checksum), "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes_a)));
    r.passed = !bytes_a.empty() && bytes_a == bytes_b;
    r.detail = std::string("checksum ") + checksum + ", " + std::to_string(bytes_a.size()) +
               " bytes" + (r.passed ? "" : ", files differ");
    return r;
}

using CheckFn = CheckResult (*)();

const std::vector<std::pair<std::string, CheckFn>>& suite_table() {
    static const std::vector<std::pair<std::string, CheckFn>> table{
        {"schedule", check_schedule},     {"rotary-shift", check_rotary_shift},
        {"urcr", check_urcr},             {"recompute", check_recompute},
        {"unbounded", check_unbounded},   {"cadence", check_cadence},
        {"mci-noise", check_mci_noise},   {"causality", check_causality},
        {"dmd", check_dmd},               {"determinism", check_determinism},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& verify_suite_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [name, fn] : suite_table()) n.push_back(name);
        return n;
    }();
    return names;
}

CheckResult run_verify_suite(const std::string& name) {
    for (const auto& [suite, fn] : suite_table()) {
        if (suite != name) continue;
        const auto start = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = fn();
        } catch (const std::exception& e) {
            r.name   = name;
            r.passed = false;
            r.detail = std::string("exception: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return r;
    }
    throw ArgumentError("unknown verify suite \"" + name + "\"");
}

std::vector<CheckResult> run_all_suites() {
    std::vector<CheckResult> results;
    for (const std::string& name : verify_suite_names()) {
        results.push_back(run_verify_suite(name));
    }
    return results;
}

}  // namespace streamdiff
