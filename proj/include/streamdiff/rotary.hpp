#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "streamdiff/tensor.hpp"

namespace streamdiff {

using FrameId = std::int64_t;

// The condition frame of the first window is sourced from the reference
// latent, which sits before the stream; it carries temporal index 0.
inline constexpr FrameId kReferenceFrame = -1;

// Rotary tables factorized over (temporal, height, width). Pairs are laid out
// consecutively in head_dim order: temporal pairs first, then height, then
// width. Only the temporal axis participates in cache resets; spatial indices
// are static per-frame grid coordinates.
struct RopeTable {
    int head_dim = 0;
    double base  = 10000.0;
    int t_pairs = 0, h_pairs = 0, w_pairs = 0;
    std::vector<double> t_theta, h_theta, w_theta;  // per-pair inverse frequencies

    // Split: temporal gets half the pairs, height and width a quarter each.
    static RopeTable make(int head_dim, double base = 10000.0);
};

// Rotates each (x[2d], x[2d+1]) pair of every token by angle index*theta on
// its assigned axis. tokens: [frames x spatial x head_dim]; t_idx has one
// temporal index per frame; hw_idx has one (h, w) pair per spatial position.
Tensor apply_rope(const Tensor& tokens, std::span<const std::int64_t> t_idx,
                  std::span<const std::pair<int, int>> hw_idx, const RopeTable& table);

// In-place rotation of a [rows x head_dim] block sharing one temporal index;
// hw_idx gives the per-row spatial coordinates.
void rope_rows(MatMap block, std::int64_t t_idx, std::span<const std::pair<int, int>> hw_idx,
               const RopeTable& table);

// Strided variant: rows live at base + r * row_stride (per-head slices of
// interleaved [token x heads x head_dim] storage).
void rope_strided(float* base, Index rows, Index row_stride, std::int64_t t_idx,
                  std::span<const std::pair<int, int>> hw_idx, const RopeTable& table);

struct FrameTag {
    FrameId id;
    bool is_sink;
};

// Temporal index assignment for one pass. Sink frames keep the epoch-base
// indices [0, S); every other frame maps to id - offset, where offset is
// rebased once the window passes the reset threshold. Indices are local to an
// epoch; relative offsets inside the recent/window region survive resets.
struct IndexAssignment {
    std::int64_t epoch  = 0;
    std::int64_t offset = 0;
    std::int64_t reset_threshold = 100;

    std::vector<FrameId> sink_ids;
    std::vector<FrameId> recent_ids;  // ascending, consecutive
    std::vector<FrameId> window_ids;  // ascending, newer than all cached
    FrameId condition_source = kReferenceFrame;

    std::int64_t index_of(FrameId f) const;
    std::int64_t condition_index() const;
    std::int64_t window_start_index() const;
    std::int64_t max_index() const;
    bool has_frame(FrameId f) const;
};

IndexAssignment assign_indices(std::span<const FrameTag> cache_layout,
                               std::span<const FrameId> window_frames, FrameId condition_source,
                               const IndexAssignment& prev);

// Rebases the assignment once the smallest window index exceeds the
// threshold: sink back to [0, S), recent to [S, S + R'), window and condition
// shifted by the same constant. Returns the input unchanged when the
// threshold is not exceeded or when no rebase can shrink the indices.
IndexAssignment maybe_reset(const IndexAssignment& a);

}  // namespace streamdiff
