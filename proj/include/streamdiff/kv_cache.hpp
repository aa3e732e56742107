#pragma once

#include <deque>
#include <iosfwd>
#include <vector>

#include "streamdiff/rotary.hpp"
#include "streamdiff/tensor.hpp"

namespace streamdiff {

// One cached frame for one layer. k_raw holds the key projection output with
// no positional transform applied; rotation happens at retrieval so the same
// bytes serve every epoch.
struct CacheEntry {
    FrameId frame_id = 0;
    bool is_sink     = false;
    Tensor k_raw;  // [spatial x heads x head_dim]
    Tensor v;      // [spatial x heads x head_dim]
};

struct EvictionReport {
    std::vector<FrameId> evicted;  // oldest first
};

struct RetrievedKv {
    Tensor k_roped;  // [frames*spatial x heads x head_dim], sink frames first
    Tensor v;        // same layout, untransformed
    std::vector<FrameId> frame_ids;  // one per frame
};

// Per-layer store of generated-frame K/V tokens. The first S frames of the
// stream are pinned as sink and never evicted; the recent region is a FIFO of
// at most R frames, evicted per frame at block commit.
class KvCache {
public:
    KvCache(int layers, Index sink_capacity, Index recent_capacity, Index grid_h, Index grid_w);

    // frames_by_layer[layer] lists one block's entries in frame order; every
    // layer must carry the same frame_ids, continuing the last committed id.
    EvictionReport commit_block(const std::vector<std::vector<CacheEntry>>& frames_by_layer);

    // Keys come back rotated with the indices the assignment carries right
    // now; stored bytes are never touched.
    RetrievedKv retrieve(int layer, const IndexAssignment& assignment, const RopeTable& table) const;

    std::vector<FrameTag> layout() const;
    Index frame_count() const;
    FrameId last_committed() const { return last_committed_; }
    int layers() const { return static_cast<int>(sink_.size()); }
    Index sink_capacity() const { return sink_cap_; }
    Index recent_capacity() const { return recent_cap_; }

    const std::vector<CacheEntry>& sink_entries(int layer) const;
    const std::deque<CacheEntry>& recent_entries(int layer) const;

    // One JSON line per frame: frame_id, sink flag, content checksums
    // accumulated over all layers.
    void dump(std::ostream& out) const;

private:
    Index sink_cap_;
    Index recent_cap_;
    Index grid_h_, grid_w_;
    FrameId last_committed_ = -1;
    std::vector<std::vector<CacheEntry>> sink_;
    std::vector<std::deque<CacheEntry>> recent_;
    std::vector<std::pair<int, int>> hw_;
};

}  // namespace streamdiff
