#include "streamdiff/rotary.hpp"

#include <algorithm>
#include <cmath>

namespace streamdiff {

RopeTable RopeTable::make(int head_dim, double base) {
    if (head_dim <= 0 || head_dim % 2 != 0) {
        throw ArgumentError("rope head_dim must be even and positive, got " +
                            std::to_string(head_dim));
    }
    if (base <= 0.0) {
        throw ArgumentError("rope base must be positive");
    }
    RopeTable t;
    t.head_dim = head_dim;
    t.base     = base;
    const int pairs = head_dim / 2;
    t.t_pairs = pairs / 2;
    t.h_pairs = pairs / 4;
    t.w_pairs = pairs - t.t_pairs - t.h_pairs;

    auto fill = [base](int n) {
        std::vector<double> theta(static_cast<size_t>(n));
        for (int d = 0; d < n; ++d) {
            // theta_d = base^(-2d / D_axis) with D_axis = 2n
            theta[static_cast<size_t>(d)] = std::pow(base, -static_cast<double>(d) / n);
        }
        return theta;
    };
    t.t_theta = fill(t.t_pairs);
    t.h_theta = fill(t.h_pairs);
    t.w_theta = fill(t.w_pairs);
    return t;
}

namespace {

inline void rotate_pair(float& x0, float& x1, std::int64_t index, double theta) {
    if (index == 0) return;  // zero rotation is the exact identity
    const double angle = static_cast<double>(index) * theta;
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float a = x0, b = x1;
    x0 = a * c - b * s;
    x1 = a * s + b * c;
}

}  // namespace

void rope_strided(float* base, Index rows, Index row_stride, std::int64_t t_idx,
                  std::span<const std::pair<int, int>> hw_idx, const RopeTable& table) {
    if (static_cast<Index>(hw_idx.size()) != rows) {
        throw ArgumentError("rope spatial index count does not match token rows");
    }
    if (t_idx < 0) {
        throw ArgumentError("rope temporal index must be non-negative, got " +
                            std::to_string(t_idx));
    }
    for (Index r = 0; r < rows; ++r) {
        const auto [h, w] = hw_idx[static_cast<size_t>(r)];
        if (h < 0 || w < 0) {
            throw ArgumentError("rope spatial index must be non-negative");
        }
        float* row = base + r * row_stride;
        int p = 0;
        for (int d = 0; d < table.t_pairs; ++d, ++p) {
            rotate_pair(row[2 * p], row[2 * p + 1], t_idx, table.t_theta[static_cast<size_t>(d)]);
        }
        for (int d = 0; d < table.h_pairs; ++d, ++p) {
            rotate_pair(row[2 * p], row[2 * p + 1], h, table.h_theta[static_cast<size_t>(d)]);
        }
        for (int d = 0; d < table.w_pairs; ++d, ++p) {
            rotate_pair(row[2 * p], row[2 * p + 1], w, table.w_theta[static_cast<size_t>(d)]);
        }
    }
}

void rope_rows(MatMap block, std::int64_t t_idx, std::span<const std::pair<int, int>> hw_idx,
               const RopeTable& table) {
    if (block.cols() != table.head_dim) {
        throw ArgumentError("rope head_dim mismatch: tokens have " + std::to_string(block.cols()) +
                            ", table has " + std::to_string(table.head_dim));
    }
    rope_strided(block.data(), block.rows(), block.cols(), t_idx, hw_idx, table);
}

Tensor apply_rope(const Tensor& tokens, std::span<const std::int64_t> t_idx,
                  std::span<const std::pair<int, int>> hw_idx, const RopeTable& table) {
    if (tokens.rank() != 3) {
        throw ArgumentError("apply_rope expects tokens [frames x spatial x head_dim], got " +
                            shape_string(tokens.shape()));
    }
    const Index frames = tokens.dim(0), spatial = tokens.dim(1), hd = tokens.dim(2);
    if (hd != table.head_dim) {
        throw ArgumentError("apply_rope head_dim mismatch: tokens have " + std::to_string(hd) +
                            ", table has " + std::to_string(table.head_dim));
    }
    if (static_cast<Index>(t_idx.size()) != frames) {
        throw ArgumentError("apply_rope needs one temporal index per frame");
    }
    if (static_cast<Index>(hw_idx.size()) != spatial) {
        throw ArgumentError("apply_rope needs one (h, w) pair per spatial position");
    }
    Tensor out = tokens;
    for (Index f = 0; f < frames; ++f) {
        MatMap block(out.data() + f * spatial * hd, spatial, hd);
        rope_rows(block, t_idx[static_cast<size_t>(f)], hw_idx, table);
    }
    return out;
}

// ---------------------------------------------------------------------------
// IndexAssignment
// ---------------------------------------------------------------------------

std::int64_t IndexAssignment::index_of(FrameId f) const {
    for (size_t i = 0; i < sink_ids.size(); ++i) {
        if (sink_ids[i] == f) return static_cast<std::int64_t>(i);
    }
    if (std::binary_search(recent_ids.begin(), recent_ids.end(), f) ||
        std::binary_search(window_ids.begin(), window_ids.end(), f)) {
        return f - offset;
    }
    throw ConsistencyError("frame " + std::to_string(f) + " has no temporal index assignment");
}

std::int64_t IndexAssignment::condition_index() const {
    if (condition_source == kReferenceFrame) return 0;
    return index_of(condition_source);
}

std::int64_t IndexAssignment::window_start_index() const {
    if (window_ids.empty()) {
        throw ConsistencyError("assignment has no window frames");
    }
    return window_ids.front() - offset;
}

std::int64_t IndexAssignment::max_index() const {
    std::int64_t m = sink_ids.empty() ? 0 : static_cast<std::int64_t>(sink_ids.size()) - 1;
    if (!recent_ids.empty()) m = std::max(m, recent_ids.back() - offset);
    if (!window_ids.empty()) m = std::max(m, window_ids.back() - offset);
    m = std::max(m, condition_index());
    return m;
}

bool IndexAssignment::has_frame(FrameId f) const {
    if (std::find(sink_ids.begin(), sink_ids.end(), f) != sink_ids.end()) return true;
    return std::binary_search(recent_ids.begin(), recent_ids.end(), f) ||
           std::binary_search(window_ids.begin(), window_ids.end(), f);
}

IndexAssignment assign_indices(std::span<const FrameTag> cache_layout,
                               std::span<const FrameId> window_frames, FrameId condition_source,
                               const IndexAssignment& prev) {
    if (window_frames.empty()) {
        throw ArgumentError("assign_indices requires at least one window frame");
    }
    IndexAssignment a;
    a.epoch           = prev.epoch;
    a.offset          = prev.offset;
    a.reset_threshold = prev.reset_threshold;

    bool seen_recent = false;
    FrameId max_cached = -1;
    for (const FrameTag& tag : cache_layout) {
        if (tag.is_sink) {
            if (seen_recent) {
                throw ConsistencyError("cache layout must list sink frames first");
            }
            a.sink_ids.push_back(tag.id);
        } else {
            seen_recent = true;
            if (!a.recent_ids.empty() && tag.id <= a.recent_ids.back()) {
                throw ConsistencyError("recent cache frame ids must strictly increase");
            }
            a.recent_ids.push_back(tag.id);
        }
        max_cached = std::max(max_cached, tag.id);
    }

    a.window_ids.assign(window_frames.begin(), window_frames.end());
    std::sort(a.window_ids.begin(), a.window_ids.end());
    if (a.window_ids.front() <= max_cached) {
        throw ConsistencyError("window frames must be newer than all cached frames");
    }

    a.condition_source = condition_source;
    if (condition_source != kReferenceFrame && !a.has_frame(condition_source)) {
        throw ConsistencyError("condition source frame " + std::to_string(condition_source) +
                               " is unknown to the assignment");
    }

    // Non-sink indices must stay non-negative under the current offset.
    const FrameId oldest_shifted = a.recent_ids.empty() ? a.window_ids.front() : a.recent_ids.front();
    if (oldest_shifted - a.offset < 0) {
        throw ConsistencyError("index offset exceeds oldest non-sink frame id");
    }
    return a;
}

IndexAssignment maybe_reset(const IndexAssignment& a) {
    if (a.window_ids.empty()) return a;
    if (a.window_start_index() <= a.reset_threshold) return a;

    const std::int64_t s = static_cast<std::int64_t>(a.sink_ids.size());
    const FrameId oldest = a.recent_ids.empty() ? a.window_ids.front() : a.recent_ids.front();
    const std::int64_t new_offset = oldest - s;
    if (new_offset <= a.offset) return a;  // already fully collapsed; nothing to rebase

    IndexAssignment r = a;
    r.epoch += 1;
    r.offset = new_offset;
    return r;
}

}  // namespace streamdiff
