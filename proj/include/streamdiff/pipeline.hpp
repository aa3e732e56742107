#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "streamdiff/denoiser.hpp"
#include "streamdiff/diffusion.hpp"
#include "streamdiff/kv_cache.hpp"
#include "streamdiff/rotary.hpp"

namespace streamdiff {

struct PipelineConfig {
    ModelConfig model;
    Index sink_frames      = 3;   // pinned first block
    Index recent_frames    = 12;  // FIFO region
    Index window_blocks    = 4;   // in-flight limit
    std::int64_t reset_threshold = 100;
    // Blocks the run intends to emit; admission stops at this ordinal so no
    // audio beyond the target is ever required.
    std::int64_t target_blocks = 0;  // 0 means unbounded

    void validate() const;
};

struct StreamEvent {
    enum class Kind { admitted, denoised, emitted, evicted, reset };
    Kind kind;
    std::int64_t pass = 0;
    std::int64_t block = -1;                              // ordinal where applicable
    std::vector<FrameId> frames;                          // admitted/emitted/evicted ids
    std::vector<std::pair<std::int64_t, int>> timesteps;  // denoised: (ordinal, t) in flight
    FrameId condition_source = kReferenceFrame;           // denoised
    int condition_t = 0;
    std::vector<float> condition_eps;  // noise drawn for the condition frame
    std::vector<float> condition_x;    // the condition latent actually used
    std::int64_t epoch = 0, offset = 0;
    std::int64_t window_start_index = 0;
};

const char* event_kind_name(StreamEvent::Kind kind);
std::string event_to_json(const StreamEvent& e);

// Per-block record of the state a block's committed keys/values were computed
// from; enough to replay the stream without the cache.
struct BlockHistory {
    std::int64_t ordinal = 0;
    std::vector<FrameId> frame_ids;
    std::vector<std::int64_t> t_indices;  // temporal indices at the final pass
    Tensor final_input;                   // [frames_per_block x C x H x W] at final t
    int final_t = 0;
    Tensor cond_latent;  // [C x H x W] condition used at the final pass
    int cond_t = 0;
    std::int64_t cond_index = 0;
    FrameId cond_source = kReferenceFrame;
};

struct BenchReport {
    std::int64_t passes = 0;
    std::int64_t forwards = 0;
    std::int64_t blocks_emitted = 0;
    std::int64_t frames_emitted = 0;
    double wall_seconds = 0.0;
    double frames_per_second = 0.0;
    Index cache_frames_final = 0;
    Index cache_frames_peak = 0;
    bool cache_constant_after_fill = true;
    std::int64_t resets = 0;
};

// The outer autoregressive loop: admission, joint denoising at staggered
// noise levels, condition refresh, emission, cache commit, and index resets.
class Pipeline {
public:
    enum class Mode {
        Cached,     // committed K/V reused through the cache
        Recompute,  // every pass rebuilds all past context in-context
    };

    Pipeline(const PipelineConfig& config, ConditioningBundle bundle, DenoiserParams params,
             std::uint64_t seed, Mode mode = Mode::Cached);

    // Runs one pass; returns its events in order.
    std::vector<StreamEvent> run_pass();

    // Runs passes until `blocks` have been emitted in total.
    std::vector<StreamEvent> run_until(std::int64_t blocks);

    std::int64_t pass_count() const { return pass_; }
    std::int64_t emitted_blocks() const { return emitted_blocks_; }
    const KvCache& cache() const { return cache_; }
    const IndexAssignment& index_state() const { return index_state_; }
    std::int64_t resets() const { return resets_; }
    std::int64_t max_index_seen() const { return max_index_seen_; }

    // Emission sink; called with (ordinal, clean block [fpb x C x H x W]).
    void on_emit(std::function<void(std::int64_t, const Tensor&)> sink) {
        emit_sink_ = std::move(sink);
    }

    void record_history(bool on) { record_history_ = on; }
    const std::vector<BlockHistory>& history() const { return history_; }

    // Streaming audio: rows may arrive while run_pass is blocked waiting for
    // them. close_audio() marks the feed complete; a pass that then still
    // lacks features fails with an input error.
    void append_audio(const Tensor& rows);  // [n x audio_dim]
    void close_audio();
    Index audio_frames() const;

private:
    struct InFlight {
        std::int64_t ordinal = 0;
        std::vector<FrameId> frame_ids;
        Tensor latent;  // [fpb x C x H x W], current x_t
        TimestepQueue queue;
    };

    bool admission_due() const;
    void admit_block(std::vector<StreamEvent>& events);
    void wait_for_audio(FrameId last_needed);
    Tensor audio_snapshot();

    PipelineConfig config_;
    ConditioningBundle bundle_;
    DenoiserParams params_;
    RopeTable table_;
    Mode mode_;

    KvCache cache_;
    std::deque<InFlight> window_;
    IndexAssignment index_state_;
    std::int64_t pass_ = 0;
    std::int64_t next_ordinal_ = 1;
    std::int64_t emitted_blocks_ = 0;
    std::int64_t resets_ = 0;
    std::int64_t max_index_seen_ = 0;
    FrameId next_frame_id_ = 0;

    Tensor last_clean_;  // [C x H x W], reference until the first emission
    FrameId last_clean_id_ = kReferenceFrame;

    Rng rng_block_noise_;
    Rng rng_condition_;

    std::function<void(std::int64_t, const Tensor&)> emit_sink_;
    bool record_history_ = false;
    std::vector<BlockHistory> history_;

    mutable std::mutex audio_mu_;
    std::condition_variable audio_cv_;
    std::vector<float> audio_rows_;
    Index audio_count_ = 0;
    bool audio_closed_ = false;
};

// Timed fresh run at the given seed; audio is synthesized internally.
BenchReport bench(const PipelineConfig& config, std::int64_t blocks, std::uint64_t seed);

// Deterministic synthetic audio features (stand-in for a real extractor).
Tensor synth_audio(Index frames, int dim, std::uint64_t seed);

}  // namespace streamdiff
