#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "streamdiff/tensor.hpp"

namespace streamdiff {

inline constexpr int kMaxTimestep = 1000;

// Baseline denoising grid and the interleaved midpoints used to bootstrap the
// first blocks. Sub-steps are dropped highest-noise-last: 125 first, then
// 375, then 625.
inline constexpr std::array<int, 4> kMainSteps{1000, 750, 500, 250};
inline constexpr std::array<int, 4> kSubSteps{875, 625, 375, 125};

// Training-time MCI noising probability; carried as a configuration constant
// for the schedule-sampling side of the distillation loop.
inline constexpr double kMciNoiseProbability = 0.7;

// sigma(t) = t / 1000: linear-interpolation corruption with an x0 sampler.
float sigma_of(int t);

// Ordered timesteps that remain to be visited by one block. The first block
// runs all 8 steps, then 7, 6, 5, and every block from ordinal 5 on runs the
// baseline 4-step grid.
struct TimestepQueue {
    std::int64_t ordinal = 0;
    std::vector<int> remaining;  // strictly decreasing

    bool exhausted() const { return remaining.empty(); }
    int current() const;  // head of the queue
    int pop();            // removes and returns the head
};

TimestepQueue build_queue(std::int64_t ordinal);

// Per-ordinal queue table, one row per ordinal 1..5, tab-separated timesteps.
std::string schedule_tsv();

struct NoisedSample {
    Tensor x_t;
    Tensor eps;
};

// x_t = (1 - sigma(t)) * x0 + sigma(t) * eps with eps ~ N(0, I). The drawn
// eps is returned for test oracles and event logging.
NoisedSample add_noise(const Tensor& x0, int t, Rng& rng);

// Re-noises the x0 prediction from t_cur down to t_next along the straight
// path implied by the estimated noise; returns x0_hat exactly at t_next = 0.
Tensor sampler_step(const Tensor& x_t, const Tensor& x0_hat, int t_cur, int t_next);

// Condition frame for motion injection: the previous clean block's last
// latent re-noised to the front block's current level.
NoisedSample make_condition_frame(const Tensor& prev_clean_last, int t_front, Rng& rng);

}  // namespace streamdiff
