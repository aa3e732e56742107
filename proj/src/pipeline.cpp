#include "streamdiff/pipeline.hpp"

#include <chrono>
#include <cstring>

#include <nlohmann/json.hpp>

#include "streamdiff/errors.hpp"

namespace streamdiff {

void PipelineConfig::validate() const {
    model.validate();
    if (sink_frames != model.frames_per_block) {
        throw ArgumentError("sink capacity must equal frames per block, got " +
                            std::to_string(sink_frames));
    }
    if (recent_frames < 1) {
        throw ArgumentError("recent capacity must be at least one frame");
    }
    if (window_blocks < 1) {
        throw ArgumentError("window must hold at least one block");
    }
    if (reset_threshold < 1) {
        throw ArgumentError("reset threshold must be positive");
    }
    if (target_blocks < 0) {
        throw ArgumentError("target block count must be non-negative");
    }
}

const char* event_kind_name(StreamEvent::Kind kind) {
    switch (kind) {
        case StreamEvent::Kind::admitted: return "admitted";
        case StreamEvent::Kind::denoised: return "denoised";
        case StreamEvent::Kind::emitted: return "emitted";
        case StreamEvent::Kind::evicted: return "evicted";
        case StreamEvent::Kind::reset: return "reset";
    }
    return "unknown";
}

std::string event_to_json(const StreamEvent& e) {
    nlohmann::json j;
    j["kind"] = event_kind_name(e.kind);
    j["pass"] = e.pass;
    if (e.block >= 0) j["block"] = e.block;
    if (!e.frames.empty()) j["frames"] = e.frames;
    if (e.kind == StreamEvent::Kind::denoised) {
        nlohmann::json ts = nlohmann::json::array();
        for (const auto& [ordinal, t] : e.timesteps) ts.push_back({ordinal, t});
        j["timesteps"]        = ts;
        j["condition_source"] = e.condition_source;
        j["condition_t"]      = e.condition_t;
        j["condition_eps"]    = e.condition_eps;
        j["condition_x"]      = e.condition_x;
        j["epoch"]            = e.epoch;
        j["offset"]           = e.offset;
        j["window_start"]     = e.window_start_index;
    }
    if (e.kind == StreamEvent::Kind::reset) {
        j["epoch"]        = e.epoch;
        j["offset"]       = e.offset;
        j["window_start"] = e.window_start_index;
    }
    return j.dump();
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Pipeline::Pipeline(const PipelineConfig& config, ConditioningBundle bundle, DenoiserParams params,
                   std::uint64_t seed, Mode mode)
    : config_(config),
      bundle_(std::move(bundle)),
      params_(std::move(params)),
      table_(RopeTable::make(config.model.head_dim())),
      mode_(mode),
      cache_(config.model.layers, config.sink_frames, config.recent_frames, config.model.grid_h,
             config.model.grid_w) {
    config_.validate();
    if (!(params_.config == config_.model)) {
        throw ConsistencyError("denoiser parameters were built for a different model config");
    }
    if (bundle_.identity.size() != config_.model.identity_dim) {
        throw InputError("identity embedding has " + std::to_string(bundle_.identity.size()) +
                         " values, config wants " + std::to_string(config_.model.identity_dim));
    }
    if (bundle_.reference.size() != config_.model.frame_elems()) {
        throw InputError("reference latent has " + std::to_string(bundle_.reference.size()) +
                         " values, config wants " + std::to_string(config_.model.frame_elems()));
    }
    if (bundle_.audio.size() > 0) {
        if (bundle_.audio.rank() != 2 || bundle_.audio.last_dim() != config_.model.audio_dim) {
            throw InputError("audio features must be [frames x " +
                             std::to_string(config_.model.audio_dim) + "], got " +
                             shape_string(bundle_.audio.shape()));
        }
        audio_rows_.assign(bundle_.audio.data(), bundle_.audio.data() + bundle_.audio.size());
        audio_count_ = bundle_.audio.dim(0);
    } else {
        // Streamed runs may start with no audio at all; rows arrive through
        // append_audio before the first admission needs them.
        bundle_.audio = Tensor{};
    }

    index_state_.reset_threshold = config_.reset_threshold;
    last_clean_ = bundle_.reference;

    Rng master(seed);
    rng_block_noise_ = master.fork("block-noise");
    rng_condition_   = master.fork("condition");

    if (mode_ == Mode::Recompute) record_history_ = true;
}

void Pipeline::append_audio(const Tensor& rows) {
    if (rows.rank() != 2 || rows.last_dim() != config_.model.audio_dim) {
        throw InputError("audio rows must be [n x " + std::to_string(config_.model.audio_dim) +
                         "], got " + shape_string(rows.shape()));
    }
    {
        std::lock_guard<std::mutex> lock(audio_mu_);
        if (audio_closed_) {
            throw InputError("audio feed is closed");
        }
        audio_rows_.insert(audio_rows_.end(), rows.data(), rows.data() + rows.size());
        audio_count_ += rows.dim(0);
    }
    audio_cv_.notify_all();
}

void Pipeline::close_audio() {
    {
        std::lock_guard<std::mutex> lock(audio_mu_);
        audio_closed_ = true;
    }
    audio_cv_.notify_all();
}

Index Pipeline::audio_frames() const {
    std::lock_guard<std::mutex> lock(audio_mu_);
    return audio_count_;
}

void Pipeline::wait_for_audio(FrameId last_needed) {
    std::unique_lock<std::mutex> lock(audio_mu_);
    audio_cv_.wait(lock, [&] { return audio_count_ > last_needed || audio_closed_; });
    if (audio_count_ <= last_needed) {
        throw InputError("audio features end at frame " + std::to_string(audio_count_) +
                         ", generation needs frame " + std::to_string(last_needed));
    }
}

Tensor Pipeline::audio_snapshot() {
    std::lock_guard<std::mutex> lock(audio_mu_);
    if (bundle_.audio.rank() != 2 || bundle_.audio.dim(0) != audio_count_) {
        bundle_.audio = Tensor({audio_count_, config_.model.audio_dim}, audio_rows_);
    }
    return bundle_.audio;
}

bool Pipeline::admission_due() const {
    if (static_cast<Index>(window_.size()) >= config_.window_blocks) return false;
    if (config_.target_blocks > 0 && next_ordinal_ > config_.target_blocks) return false;
    // Bootstrap ordinals land every other pass so their 8/7/6/5-step queues
    // drain one block per pass from pass 8 on; afterwards any vacancy admits.
    if (next_ordinal_ <= 4) return pass_ == 2 * next_ordinal_ - 1;
    return true;
}

void Pipeline::admit_block(std::vector<StreamEvent>& events) {
    InFlight b;
    b.ordinal = next_ordinal_;
    for (int i = 0; i < config_.model.frames_per_block; ++i) {
        b.frame_ids.push_back(next_frame_id_ + i);
    }
    wait_for_audio(b.frame_ids.back());

    Rng noise = rng_block_noise_.fork(static_cast<std::uint64_t>(b.ordinal));
    b.latent  = randn(noise, {config_.model.frames_per_block, config_.model.channels,
                              config_.model.grid_h, config_.model.grid_w});
    b.queue   = build_queue(b.ordinal);

    StreamEvent e;
    e.kind   = StreamEvent::Kind::admitted;
    e.pass   = pass_;
    e.block  = b.ordinal;
    e.frames = b.frame_ids;
    e.timesteps.emplace_back(b.ordinal, b.queue.current());
    events.push_back(std::move(e));

    next_frame_id_ += config_.model.frames_per_block;
    ++next_ordinal_;
    window_.push_back(std::move(b));
}

std::vector<StreamEvent> Pipeline::run_pass() {
    ++pass_;
    std::vector<StreamEvent> events;

    if (admission_due()) {
        admit_block(events);
    }
    if (window_.empty()) {
        return events;
    }

    const ModelConfig& m = config_.model;
    const int fpb        = m.frames_per_block;
    const Index fw       = static_cast<Index>(window_.size()) * fpb;

    // Condition frame: previous clean block's last latent re-noised to the
    // front block's current level; the reference latent before any emission.
    const int t_front   = window_.front().queue.current();
    Rng cond_rng        = rng_condition_.fork(static_cast<std::uint64_t>(pass_));
    NoisedSample cond   = make_condition_frame(last_clean_, t_front, cond_rng);
    const FrameId c_src = last_clean_id_;

    std::vector<FrameId> window_ids;
    std::vector<int> window_t;
    window_ids.reserve(static_cast<size_t>(fw));
    window_t.reserve(static_cast<size_t>(fw));
    Tensor window_latents({fw, m.channels, m.grid_h, m.grid_w});
    {
        Index f = 0;
        for (const InFlight& b : window_) {
            for (int i = 0; i < fpb; ++i, ++f) {
                window_ids.push_back(b.frame_ids[static_cast<size_t>(i)]);
                window_t.push_back(b.queue.current());
                std::memcpy(window_latents.data() + f * m.frame_elems(),
                            b.latent.data() + i * m.frame_elems(),
                            static_cast<size_t>(m.frame_elems()) * sizeof(float));
            }
        }
    }

    bundle_.audio = audio_snapshot();

    IndexAssignment assignment;
    Tensor x0_window;  // [fw x C x H x W]
    std::vector<std::vector<CacheEntry>> kv_candidates;
    std::vector<std::int64_t> window_indices(static_cast<size_t>(fw));

    if (mode_ == Mode::Cached) {
        assignment = assign_indices(cache_.layout(), window_ids, c_src, index_state_);
        max_index_seen_ = std::max(max_index_seen_, assignment.max_index());
        ForwardResult r = forward(window_latents, window_t, cond.x_t, t_front, cache_, assignment,
                                  table_, bundle_, params_);
        x0_window     = std::move(r.x0);
        kv_candidates = std::move(r.kv_candidates);
        for (Index f = 0; f < fw; ++f) {
            window_indices[static_cast<size_t>(f)] =
                assignment.index_of(window_ids[static_cast<size_t>(f)]);
        }
    } else {
        // Full recomputation: every previously committed block re-enters the
        // context as tokens, each next to the condition frame its keys were
        // computed with. Indices are global frame ids; this mode never
        // resets.
        std::vector<InContextFrame> frames;
        const Index past = static_cast<Index>(history_.size());
        frames.reserve(static_cast<size_t>(past * (1 + fpb) + 1 + fw));
        for (const BlockHistory& bh : history_) {
            InContextFrame cf;
            cf.latent   = bh.cond_latent;
            cf.t        = bh.cond_t;
            cf.t_index  = bh.cond_index;
            cf.audio_id = bh.cond_source;
            cf.queried  = false;
            frames.push_back(std::move(cf));
            for (int i = 0; i < fpb; ++i) {
                InContextFrame bf;
                bf.latent = Tensor({m.channels, m.grid_h, m.grid_w},
                                   std::vector<float>(bh.final_input.data() + i * m.frame_elems(),
                                                      bh.final_input.data() +
                                                          (i + 1) * m.frame_elems()));
                bf.t        = bh.final_t;
                bf.t_index  = bh.t_indices[static_cast<size_t>(i)];
                bf.audio_id = bh.frame_ids[static_cast<size_t>(i)];
                bf.queried  = true;
                frames.push_back(std::move(bf));
            }
        }
        {
            InContextFrame cf;
            cf.latent   = cond.x_t;
            cf.t        = t_front;
            cf.t_index  = c_src == kReferenceFrame ? 0 : c_src;
            cf.audio_id = c_src;
            cf.queried  = false;
            frames.push_back(std::move(cf));
        }
        for (Index f = 0; f < fw; ++f) {
            InContextFrame wf;
            wf.latent = Tensor({m.channels, m.grid_h, m.grid_w},
                               std::vector<float>(window_latents.data() + f * m.frame_elems(),
                                                  window_latents.data() + (f + 1) * m.frame_elems()));
            wf.t        = window_t[static_cast<size_t>(f)];
            wf.t_index  = window_ids[static_cast<size_t>(f)];
            wf.audio_id = window_ids[static_cast<size_t>(f)];
            wf.queried  = true;
            frames.push_back(std::move(wf));
            window_indices[static_cast<size_t>(f)] = window_ids[static_cast<size_t>(f)];
        }

        // Rows: block j sees blocks < j and its own condition; window rows
        // see all past blocks, the current condition, and window blocks up
        // to their own. Past conditions stay private to their block.
        const Index total = static_cast<Index>(frames.size());
        Tensor mask({total, total});
        auto mk = [&](Index row, Index col) { mask[row * total + col] = 1.0f; };
        Index row = 0;
        for (Index j = 0; j < past; ++j) {
            ++row;  // condition rows never query
            for (int i = 0; i < fpb; ++i, ++row) {
                for (Index col = 0; col < j * (1 + fpb); ++col) {
                    if (col % (1 + fpb) == 0) continue;  // another block's condition
                    mk(row, col);
                }
                mk(row, j * (1 + fpb));  // own condition
                for (int i2 = 0; i2 < fpb; ++i2) {
                    mk(row, j * (1 + fpb) + 1 + i2);
                }
            }
        }
        const Index cur_cond = past * (1 + fpb);
        ++row;  // current condition row stays unqueried
        for (Index f = 0; f < fw; ++f, ++row) {
            const Index block = f / fpb;
            for (Index col = 0; col < cur_cond; ++col) {
                if (col % (1 + fpb) == 0) continue;
                mk(row, col);
            }
            mk(row, cur_cond);
            const Index visible = std::min((block + 1) * fpb, fw);
            for (Index f2 = 0; f2 < visible; ++f2) {
                mk(row, cur_cond + 1 + f2);
            }
        }

        max_index_seen_ =
            std::max(max_index_seen_, window_ids.empty() ? 0 : window_ids.back());
        InContextResult r =
            forward_incontext(frames, mask, nullptr, nullptr, table_, bundle_, params_);
        const Index first_window = total - fw;
        x0_window = Tensor({fw, m.channels, m.grid_h, m.grid_w},
                           std::vector<float>(r.x0.data() + first_window * m.frame_elems(),
                                              r.x0.data() + total * m.frame_elems()));
    }

    {
        StreamEvent e;
        e.kind = StreamEvent::Kind::denoised;
        e.pass = pass_;
        for (const InFlight& b : window_) {
            e.timesteps.emplace_back(b.ordinal, b.queue.current());
        }
        e.condition_source = c_src;
        e.condition_t      = t_front;
        e.condition_eps.assign(cond.eps.data(), cond.eps.data() + cond.eps.size());
        e.condition_x.assign(cond.x_t.data(), cond.x_t.data() + cond.x_t.size());
        e.epoch  = index_state_.epoch;
        e.offset = index_state_.offset;
        e.window_start_index =
            mode_ == Mode::Cached ? assignment.window_start_index() : window_ids.front();
        events.push_back(std::move(e));
    }

    // Sampler advance for every in-flight block.
    {
        Index f = 0;
        for (InFlight& b : window_) {
            Tensor x0_block({fpb, m.channels, m.grid_h, m.grid_w},
                            std::vector<float>(x0_window.data() + f * m.frame_elems(),
                                               x0_window.data() + (f + fpb) * m.frame_elems()));
            const int t_cur = b.queue.pop();
            const int t_next = b.queue.exhausted() ? 0 : b.queue.current();
            const bool completes = b.queue.exhausted();
            if (completes && record_history_) {
                BlockHistory bh;
                bh.ordinal   = b.ordinal;
                bh.frame_ids = b.frame_ids;
                for (int i = 0; i < fpb; ++i) {
                    bh.t_indices.push_back(window_indices[static_cast<size_t>(f + i)]);
                }
                bh.final_input = b.latent;
                bh.final_t     = t_cur;
                bh.cond_latent = cond.x_t;
                bh.cond_t      = t_front;
                bh.cond_index  = mode_ == Mode::Cached ? assignment.condition_index()
                                                       : (c_src == kReferenceFrame ? 0 : c_src);
                bh.cond_source = c_src;
                history_.push_back(std::move(bh));
            }
            b.latent = sampler_step(b.latent, x0_block, t_cur, t_next);
            f += fpb;
        }
    }

    // Emit every completed front block, commit its final-pass keys/values.
    Index window_pos = 0;
    while (!window_.empty() && window_.front().queue.exhausted()) {
        InFlight done = std::move(window_.front());
        window_.pop_front();

        StreamEvent e;
        e.kind   = StreamEvent::Kind::emitted;
        e.pass   = pass_;
        e.block  = done.ordinal;
        e.frames = done.frame_ids;
        events.push_back(std::move(e));

        if (emit_sink_) emit_sink_(done.ordinal, done.latent);
        ++emitted_blocks_;
        last_clean_ = Tensor({m.channels, m.grid_h, m.grid_w},
                             std::vector<float>(done.latent.data() + (fpb - 1) * m.frame_elems(),
                                                done.latent.data() + fpb * m.frame_elems()));
        last_clean_id_ = done.frame_ids.back();

        if (mode_ == Mode::Cached) {
            std::vector<std::vector<CacheEntry>> per_layer(
                static_cast<size_t>(m.layers));
            for (int layer = 0; layer < m.layers; ++layer) {
                auto& dst = per_layer[static_cast<size_t>(layer)];
                auto& src = kv_candidates[static_cast<size_t>(layer)];
                for (int i = 0; i < fpb; ++i) {
                    dst.push_back(std::move(src[static_cast<size_t>(window_pos * fpb + i)]));
                }
            }
            EvictionReport ev = cache_.commit_block(per_layer);
            if (!ev.evicted.empty()) {
                StreamEvent ee;
                ee.kind   = StreamEvent::Kind::evicted;
                ee.pass   = pass_;
                ee.frames = ev.evicted;
                events.push_back(std::move(ee));
            }
        }
        ++window_pos;
    }

    if (mode_ == Mode::Cached) {
        const IndexAssignment after = maybe_reset(assignment);
        if (after.epoch != assignment.epoch) {
            ++resets_;
            StreamEvent e;
            e.kind               = StreamEvent::Kind::reset;
            e.pass               = pass_;
            e.epoch              = after.epoch;
            e.offset             = after.offset;
            e.window_start_index = assignment.window_start_index();
            events.push_back(std::move(e));
        }
        index_state_.epoch  = after.epoch;
        index_state_.offset = after.offset;
    }

    return events;
}

std::vector<StreamEvent> Pipeline::run_until(std::int64_t blocks) {
    if (config_.target_blocks > 0 && blocks > config_.target_blocks) {
        throw ArgumentError("run_until(" + std::to_string(blocks) +
                            ") exceeds the configured target of " +
                            std::to_string(config_.target_blocks) + " blocks");
    }
    std::vector<StreamEvent> events;
    const std::int64_t pass_limit = pass_ + blocks * 8 + 64;
    while (emitted_blocks_ < blocks) {
        if (pass_ >= pass_limit) {
            throw ConsistencyError("emission stalled: " + std::to_string(emitted_blocks_) +
                                   " of " + std::to_string(blocks) + " blocks after " +
                                   std::to_string(pass_) + " passes");
        }
        auto batch = run_pass();
        events.insert(events.end(), std::make_move_iterator(batch.begin()),
                      std::make_move_iterator(batch.end()));
    }
    return events;
}

// ---------------------------------------------------------------------------
// Bench and synthetic inputs
// ---------------------------------------------------------------------------

Tensor synth_audio(Index frames, int dim, std::uint64_t seed) {
    Rng rng(seed);
    return randn(rng, {frames, dim});
}

BenchReport bench(const PipelineConfig& config, std::int64_t blocks, std::uint64_t seed) {
    if (blocks < 0) throw ArgumentError("bench needs blocks >= 0, got " + std::to_string(blocks));
    PipelineConfig cfg = config;
    cfg.target_blocks  = blocks;

    Rng master(seed);
    ConditioningBundle bundle;
    Rng id_rng       = master.fork("identity");
    bundle.identity  = randn(id_rng, {cfg.model.identity_dim});
    Rng ref_rng      = master.fork("reference");
    bundle.reference = randn(ref_rng, {cfg.model.channels, cfg.model.grid_h, cfg.model.grid_w});
    if (blocks > 0) {
        bundle.audio = synth_audio(blocks * cfg.model.frames_per_block, cfg.model.audio_dim,
                                   master.fork("audio").seed);
    }

    Rng param_rng         = master.fork("params");
    DenoiserParams params = DenoiserParams::init(cfg.model, param_rng);

    Pipeline p(cfg, std::move(bundle), std::move(params), seed);
    p.close_audio();

    BenchReport report;
    const Index fill = cfg.sink_frames + cfg.recent_frames;
    bool filled      = false;

    const auto start = std::chrono::steady_clock::now();
    while (p.emitted_blocks() < blocks) {
        p.run_pass();
        const Index count        = p.cache().frame_count();
        report.cache_frames_peak = std::max(report.cache_frames_peak, count);
        if (filled && count != fill) report.cache_constant_after_fill = false;
        if (count == fill) filled = true;
    }
    const auto end = std::chrono::steady_clock::now();

    report.passes          = p.pass_count();
    report.forwards        = p.pass_count();
    report.blocks_emitted  = p.emitted_blocks();
    report.frames_emitted  = p.emitted_blocks() * cfg.model.frames_per_block;
    report.wall_seconds    = std::chrono::duration<double>(end - start).count();
    report.frames_per_second =
        report.wall_seconds > 0.0 ? static_cast<double>(report.frames_emitted) / report.wall_seconds
                                  : 0.0;
    report.cache_frames_final = p.cache().frame_count();
    report.resets             = p.resets();
    return report;
}

}  // namespace streamdiff
