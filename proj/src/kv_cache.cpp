#include "streamdiff/kv_cache.hpp"

#include <cstdio>
#include <cstring>
#include <ostream>

namespace streamdiff {

KvCache::KvCache(int layers, Index sink_capacity, Index recent_capacity, Index grid_h,
                 Index grid_w) {
    if (layers <= 0) {
        throw ArgumentError("cache needs at least one layer");
    }
    if (sink_capacity < 0 || recent_capacity < 0) {
        throw ArgumentError("cache capacities must be non-negative");
    }
    if (grid_h <= 0 || grid_w <= 0) {
        throw ArgumentError("cache grid extents must be positive");
    }
    sink_cap_   = sink_capacity;
    recent_cap_ = recent_capacity;
    grid_h_     = grid_h;
    grid_w_     = grid_w;
    sink_.resize(static_cast<size_t>(layers));
    recent_.resize(static_cast<size_t>(layers));
    hw_.reserve(static_cast<size_t>(grid_h * grid_w));
    for (Index h = 0; h < grid_h; ++h) {
        for (Index w = 0; w < grid_w; ++w) {
            hw_.emplace_back(static_cast<int>(h), static_cast<int>(w));
        }
    }
}

EvictionReport KvCache::commit_block(const std::vector<std::vector<CacheEntry>>& frames_by_layer) {
    const size_t n_layers = sink_.size();
    if (frames_by_layer.size() != n_layers) {
        throw ConsistencyError("commit_block got " + std::to_string(frames_by_layer.size()) +
                               " layers, cache has " + std::to_string(n_layers));
    }
    const size_t n_frames = frames_by_layer[0].size();
    if (n_frames == 0) {
        throw ArgumentError("commit_block needs at least one frame per layer");
    }
    const Index spatial = grid_h_ * grid_w_;
    for (size_t l = 0; l < n_layers; ++l) {
        const auto& frames = frames_by_layer[l];
        if (frames.size() != n_frames) {
            throw ConsistencyError("layers disagree on frame count in commit_block");
        }
        for (size_t f = 0; f < n_frames; ++f) {
            const CacheEntry& e = frames[f];
            if (e.frame_id != frames_by_layer[0][f].frame_id) {
                throw ConsistencyError("layers disagree on frame_ids in commit_block");
            }
            // Ids must continue the stream with no gap and no repeat.
            const FrameId expect = last_committed_ + 1 + static_cast<FrameId>(f);
            if (e.frame_id != expect) {
                throw ConsistencyError("commit_block frame_id " + std::to_string(e.frame_id) +
                                       " breaks the stream, expected " + std::to_string(expect));
            }
            if (e.k_raw.rank() != 3 || e.k_raw.dim(0) != spatial) {
                throw ConsistencyError("cache entry k_raw must be [spatial x heads x head_dim] "
                                       "with spatial = " + std::to_string(spatial) + ", got " +
                                       shape_string(e.k_raw.shape()));
            }
            if (!e.v.same_shape(e.k_raw)) {
                throw ConsistencyError("cache entry v shape " + shape_string(e.v.shape()) +
                                       " differs from k_raw " + shape_string(e.k_raw.shape()));
            }
        }
    }

    EvictionReport report;
    for (size_t l = 0; l < n_layers; ++l) {
        for (size_t f = 0; f < n_frames; ++f) {
            CacheEntry e = frames_by_layer[l][f];
            e.is_sink    = e.frame_id < sink_cap_;
            if (e.is_sink) {
                sink_[l].push_back(std::move(e));
            } else {
                recent_[l].push_back(std::move(e));
            }
        }
        while (static_cast<Index>(recent_[l].size()) > recent_cap_) {
            if (l == 0) report.evicted.push_back(recent_[l].front().frame_id);
            recent_[l].pop_front();
        }
    }
    last_committed_ += static_cast<FrameId>(n_frames);
    return report;
}

RetrievedKv KvCache::retrieve(int layer, const IndexAssignment& assignment,
                              const RopeTable& table) const {
    if (layer < 0 || layer >= layers()) {
        throw ArgumentError("cache layer " + std::to_string(layer) + " out of range");
    }
    const auto& sink   = sink_[static_cast<size_t>(layer)];
    const auto& recent = recent_[static_cast<size_t>(layer)];
    const Index frames = static_cast<Index>(sink.size() + recent.size());

    RetrievedKv out;
    if (frames == 0) {
        return out;  // default tensors: no cached tokens
    }
    const Tensor& first = sink.empty() ? recent.front().k_raw : sink.front().k_raw;
    const Index spatial = first.dim(0), heads = first.dim(1), hd = first.dim(2);

    out.k_roped = Tensor({frames * spatial, heads, hd});
    out.v       = Tensor({frames * spatial, heads, hd});
    out.frame_ids.reserve(static_cast<size_t>(frames));

    Index f = 0;
    auto emit = [&](const CacheEntry& e) {
        const std::int64_t t_idx = assignment.index_of(e.frame_id);  // throws on gaps
        float* k_dst = out.k_roped.data() + f * spatial * heads * hd;
        float* v_dst = out.v.data() + f * spatial * heads * hd;
        std::memcpy(k_dst, e.k_raw.data(), static_cast<size_t>(spatial * heads * hd) * sizeof(float));
        std::memcpy(v_dst, e.v.data(), static_cast<size_t>(spatial * heads * hd) * sizeof(float));
        for (Index h = 0; h < heads; ++h) {
            rope_strided(k_dst + h * hd, spatial, heads * hd, t_idx, hw_, table);
        }
        out.frame_ids.push_back(e.frame_id);
        ++f;
    };
    for (const CacheEntry& e : sink) emit(e);
    for (const CacheEntry& e : recent) emit(e);
    return out;
}

std::vector<FrameTag> KvCache::layout() const {
    std::vector<FrameTag> tags;
    tags.reserve(sink_[0].size() + recent_[0].size());
    for (const CacheEntry& e : sink_[0]) tags.push_back({e.frame_id, true});
    for (const CacheEntry& e : recent_[0]) tags.push_back({e.frame_id, false});
    return tags;
}

Index KvCache::frame_count() const {
    return static_cast<Index>(sink_[0].size() + recent_[0].size());
}

const std::vector<CacheEntry>& KvCache::sink_entries(int layer) const {
    if (layer < 0 || layer >= layers()) {
        throw ArgumentError("cache layer " + std::to_string(layer) + " out of range");
    }
    return sink_[static_cast<size_t>(layer)];
}

const std::deque<CacheEntry>& KvCache::recent_entries(int layer) const {
    if (layer < 0 || layer >= layers()) {
        throw ArgumentError("cache layer " + std::to_string(layer) + " out of range");
    }
    return recent_[static_cast<size_t>(layer)];
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    const size_t n    = static_cast<size_t>(t.size()) * sizeof(float);
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

constexpr std::uint64_t kFnvBasis = 0xCBF29CE484222325ull;

}  // namespace

void KvCache::dump(std::ostream& out) const {
    const auto tags = layout();
    for (const FrameTag& tag : tags) {
        std::uint64_t k_sum = kFnvBasis, v_sum = kFnvBasis;
        for (size_t l = 0; l < sink_.size(); ++l) {
            const CacheEntry* e = nullptr;
            for (const CacheEntry& s : sink_[l]) {
                if (s.frame_id == tag.id) e = &s;
            }
            for (const CacheEntry& r : recent_[l]) {
                if (r.frame_id == tag.id) e = &r;
            }
            k_sum = fnv1a(k_sum, e->k_raw);
            v_sum = fnv1a(v_sum, e->v);
        }
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "{\"frame_id\":%lld,\"is_sink\":%s,"
                      "\"k_checksum\":\"%016llx\",\"v_checksum\":\"%016llx\"}",
                      static_cast<long long>(tag.id), tag.is_sink ? "true" : "false",
                      static_cast<unsigned long long>(k_sum),
                      static_cast<unsigned long long>(v_sum));
        out << buf << '\n';
    }
}

}  // namespace streamdiff
