#include "streamdiff/diffusion.hpp"

#include <algorithm>
#include <sstream>

namespace streamdiff {

float sigma_of(int t) {
    if (t < 0 || t > kMaxTimestep) {
        throw ArgumentError("timestep out of range [0, 1000]: " + std::to_string(t));
    }
    return static_cast<float>(t) / 1000.0f;
}

int TimestepQueue::current() const {
    if (remaining.empty()) {
        throw ConsistencyError("timestep queue for block " + std::to_string(ordinal) +
                               " is exhausted");
    }
    return remaining.front();
}

int TimestepQueue::pop() {
    const int t = current();
    remaining.erase(remaining.begin());
    return t;
}

TimestepQueue build_queue(std::int64_t ordinal) {
    if (ordinal < 1) {
        throw ArgumentError("block ordinal must be >= 1, got " + std::to_string(ordinal));
    }
    TimestepQueue q;
    q.ordinal = ordinal;
    if (ordinal >= 5) {
        q.remaining.assign(kMainSteps.begin(), kMainSteps.end());
        return q;
    }
    // Full grid minus the lowest-noise sub-steps: ordinal k drops k-1 of
    // {125, 375, 625}, keeping the high-noise ones.
    std::vector<int> dropped(kSubSteps.rbegin(), kSubSteps.rbegin() + (ordinal - 1));
    for (int main : kMainSteps) {
        q.remaining.push_back(main);
        const int sub = main - 125;
        if (std::find(dropped.begin(), dropped.end(), sub) == dropped.end()) {
            q.remaining.push_back(sub);
        }
    }
    return q;
}

std::string schedule_tsv() {
    std::ostringstream os;
    for (std::int64_t ordinal = 1; ordinal <= 5; ++ordinal) {
        os << ordinal;
        for (int t : build_queue(ordinal).remaining) {
            os << '\t' << t;
        }
        os << '\n';
    }
    return os.str();
}

NoisedSample add_noise(const Tensor& x0, int t, Rng& rng) {
    const float s = sigma_of(t);
    NoisedSample out;
    out.eps = randn(rng, x0.shape());
    if (t == 0) {
        out.x_t = x0;
    } else if (t == kMaxTimestep) {
        out.x_t = out.eps;
    } else {
        out.x_t = Tensor(x0.shape());
        out.x_t.flat() = (1.0f - s) * x0.flat() + s * out.eps.flat();
    }
    return out;
}

Tensor sampler_step(const Tensor& x_t, const Tensor& x0_hat, int t_cur, int t_next) {
    if (t_cur == 0) {
        throw ArgumentError("sampler_step with t_cur = 0: nothing to denoise");
    }
    if (t_next < 0 || t_next >= t_cur || t_cur > kMaxTimestep) {
        throw ArgumentError("sampler_step requires 0 <= t_next < t_cur <= 1000, got t_cur=" +
                            std::to_string(t_cur) + " t_next=" + std::to_string(t_next));
    }
    if (!x_t.same_shape(x0_hat)) {
        throw DimensionError("sampler_step shape mismatch: " + shape_string(x_t.shape()) +
                             " vs " + shape_string(x0_hat.shape()));
    }
    if (t_next == 0) {
        return x0_hat;
    }
    const float s_cur  = sigma_of(t_cur);
    const float s_next = sigma_of(t_next);
    Tensor out(x_t.shape());
    if (t_cur == kMaxTimestep) {
        // sigma_cur = 1: the noise estimate is x_t itself.
        out.flat() = (1.0f - s_next) * x0_hat.flat() + s_next * x_t.flat();
    } else {
        Tensor eps_hat(x_t.shape());
        eps_hat.flat() = (x_t.flat() - (1.0f - s_cur) * x0_hat.flat()) / s_cur;
        out.flat() = (1.0f - s_next) * x0_hat.flat() + s_next * eps_hat.flat();
    }
    return out;
}

NoisedSample make_condition_frame(const Tensor& prev_clean_last, int t_front, Rng& rng) {
    return add_noise(prev_clean_last, t_front, rng);
}

}  // namespace streamdiff
