#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "streamdiff/kv_cache.hpp"
#include "streamdiff/rotary.hpp"
#include "streamdiff/tensor.hpp"

namespace streamdiff {

struct ModelConfig {
    int channels     = 8;
    int grid_h       = 4;
    int grid_w       = 4;
    int width        = 64;
    int heads        = 4;
    int layers       = 4;
    int audio_dim    = 32;
    int identity_dim = 32;
    int frames_per_block = 3;

    int head_dim() const { return width / heads; }
    Index spatial() const { return static_cast<Index>(grid_h) * grid_w; }
    Index frame_elems() const { return static_cast<Index>(channels) * grid_h * grid_w; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Streamed conditioning: one audio vector per latent frame (row index =
// global frame id), a fixed identity embedding, and the reference latent.
struct ConditioningBundle {
    Tensor audio;      // [frames x audio_dim]
    Tensor identity;   // [identity_dim]
    Tensor reference;  // [channels x grid_h x grid_w]
};

struct LayerParams {
    Tensor norm1_g;
    Tensor wq, wk, wv, wo;        // self-attention, all [width x width]
    Tensor norm2_g;
    Tensor cq, ck, cv, co;        // cross-attention over memory tokens
    Tensor norm3_g;
    Tensor w1, b1, w2, b2;        // GELU MLP, hidden = 4 * width
};

struct DenoiserParams {
    ModelConfig config;
    Tensor in_w, in_b;            // latent channels -> width
    Tensor t_w1, t_b1, t_w2, t_b2;  // learned map over the sinusoidal embedding
    Tensor audio_w, audio_b;      // memory token projections
    Tensor id_w, id_b;
    Tensor ref_w, ref_b;
    std::vector<LayerParams> layers;
    Tensor head_norm_g;
    Tensor head_w, head_b;        // zero-initialized output head

    // Projections drawn scaled-normal (std = width^-1/2), gains one, biases
    // and output head zero.
    static DenoiserParams init(const ModelConfig& config, Rng& rng);
    static DenoiserParams zeros(const ModelConfig& config);

    // Stable name -> tensor enumeration; checkpoint order and test probes
    // rely on it.
    void visit(const std::function<void(const std::string&, Tensor&)>& f);
    void visit(const std::function<void(const std::string&, const Tensor&)>& f) const;
};

// Token-level attention structure at frame granularity. Rows/cols are
// ordered sink, recent, condition, window; a 1 at [i, j] lets every token of
// frame i attend every token of frame j.
struct MaskLayout {
    Index sink_frames      = 0;
    Index recent_frames    = 0;
    Index condition_frames = 0;  // 0 or 1
    Index window_frames    = 0;
    Index frames_per_block = 3;
};

// Cache and condition rows are never queried (all zero); window rows see the
// whole cache, the condition frame, and window blocks up to their own.
Tensor attention_mask(const MaskLayout& layout);

// Sinusoidal features of t/1000 passed through the learned two-layer map;
// depends on t only.
Tensor timestep_embed(int t, const DenoiserParams& params);

struct ForwardResult {
    Tensor x0;  // [window frames x channels x grid_h x grid_w]
    // Pre-rotary key/value candidates per layer per window frame, ready for
    // commit_block once the block completes.
    std::vector<std::vector<CacheEntry>> kv_candidates;
};

// One joint pass over (cache || condition || window). Window frame ids and
// the condition source come from the assignment; timesteps are per frame.
// The condition frame contributes keys/values only; its prediction slot is
// dropped before returning.
ForwardResult forward(const Tensor& window_latents, std::span<const int> window_t,
                      const Tensor& condition_latent, int condition_t, const KvCache& cache,
                      const IndexAssignment& assignment, const RopeTable& table,
                      const ConditioningBundle& bundle, const DenoiserParams& params);

// Explicit-context form of the same pass: every frame is materialized
// in-context instead of coming from the cache, with caller-chosen mask and
// temporal indices. This is how cache-free recomputation reproduces a
// streamed run; forward() is a thin wrapper over it.
struct InContextFrame {
    Tensor latent;             // [channels x grid_h x grid_w]
    int t = 0;
    std::int64_t t_index = 0;  // temporal rotary index
    FrameId audio_id = -1;     // row into bundle.audio; -1 means silence
    bool queried = false;      // receives self-attention updates and a prediction
};

struct InContextResult {
    Tensor x0;  // [frames x channels x grid_h x grid_w], meaningful for queried rows
    // Pre-rotary (k_raw, v) per layer per frame.
    std::vector<std::vector<std::pair<Tensor, Tensor>>> kv_raw;
};

// frame_mask is frame-granular over (cache frames ++ frames); a zero row
// means the frame donates keys/values but is never queried. cache may be
// null for a fully in-context pass.
InContextResult forward_incontext(std::span<const InContextFrame> frames, const Tensor& frame_mask,
                                  const KvCache* cache, const IndexAssignment* assignment,
                                  const RopeTable& table, const ConditioningBundle& bundle,
                                  const DenoiserParams& params);

// Checkpoint: "JADN" magic, version, config fields, then the visit-order
// named f32 arrays. Round-trips bit-exactly.
void save_checkpoint(const DenoiserParams& params, std::ostream& out);
DenoiserParams load_checkpoint(std::istream& in);
void save_checkpoint_file(const DenoiserParams& params, const std::string& path);
DenoiserParams load_checkpoint_file(const std::string& path);

}  // namespace streamdiff
