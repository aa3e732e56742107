#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "streamdiff/tensor.hpp"

namespace streamdiff {

// 2-D toy distillation: a multi-step teacher trained on a two-Gaussian
// mixture is distilled into a one-step generator by matching distributions
// through a score difference. Everything here runs in double so the
// finite-difference checks carry no precision caveats.

using Point = std::array<double, 2>;

// Equal-weight mixture of N((-2,0), I) and N((+2,0), I).
Point sample_mixture(Rng& rng);

// Three-layer tanh perceptron with hand-rolled backpropagation. Parameters
// live in one flat vector so optimizers and probes stay trivial.
struct ToyMlp {
    int in_dim = 0, hidden = 0, out_dim = 0;
    std::vector<double> params;

    static ToyMlp init(int in_dim, int hidden, int out_dim, Rng& rng);
    std::size_t param_count() const;

    struct Trace {
        std::vector<double> x, a1, a2, y;  // input and post-activation values
    };

    void forward(std::span<const double> x, Trace& tr) const;

    // Accumulates dL/dparams into grad given dL/dy; optionally writes dL/dx.
    void backward(const Trace& tr, std::span<const double> dy, std::span<double> grad,
                  std::span<double> dx = {}) const;
};

// x0-prediction net: (point, sigma(t)) -> predicted clean point.
struct ToyScoreNet {
    ToyMlp net;

    static ToyScoreNet init(int hidden, Rng& rng);
    Point predict(const Point& x_t, int t) const;
};

// One-step generator: noise in R^2 -> sample in R^2.
struct ToyGenerator {
    ToyMlp net;

    static ToyGenerator init(int hidden, Rng& rng);
    Point sample(const Point& eps) const;
};

// Denoising-regression teacher. Timesteps are sampled 10% at t=0, otherwise
// sub-steps with probability 0.7 and main steps with 0.3. Zero steps returns
// the random initialization untouched.
ToyScoreNet train_teacher(const std::function<Point(Rng&)>& sampler, int steps, Rng& rng,
                          int hidden = 32);

// Mean over the batch of d_i . G(eps_i) with the directions d frozen; the
// quantity whose parameter gradient the distillation step follows.
double surrogate_value(const ToyGenerator& gen, std::span<const Point> eps,
                       std::span<const Point> d);
std::vector<double> surrogate_grad(const ToyGenerator& gen, std::span<const Point> eps,
                                   std::span<const Point> d);

// One distillation gradient: x = G(eps), x_t = noised x at a main-step t
// drawn uniformly, d = x0_fake(x_t) - x0_real(x_t), gradient of mean d . x
// with d detached.
struct DmdGrad {
    std::vector<double> grad;
    std::vector<Point> d;
    std::vector<int> t;
};
DmdGrad dmd_generator_grad(const ToyGenerator& gen, const ToyScoreNet& teacher,
                           const ToyScoreNet& fake, std::span<const Point> eps, Rng& rng);

struct DmdOptions {
    int iterations = 2000;
    int batch = 64;
    double lr_generator = 0.01;
    double lr_fake = 0.002;   // 5x slower than the generator
    int fake_every = 5;       // one fake update per this many generator updates
    int hidden = 32;
    std::uint64_t seed = 1;
    int eval_samples = 4096;
    int eval_points = 20;     // KL trajectory length (plus the initial point)
};

struct DmdReport {
    ToyGenerator generator;
    ToyScoreNet fake;
    std::int64_t generator_updates = 0;
    std::int64_t fake_updates = 0;
    double kl_initial = 0.0;
    double kl_final = 0.0;
    std::vector<std::pair<std::int64_t, double>> kl_trajectory;  // (iteration, KL)
    Point sample_mean{0.0, 0.0};
    std::vector<Point> final_samples;
};

// Alternating distillation: every iteration steps the generator, every
// fake_every-th iteration also steps the fake score toward the generator's
// current samples. Non-finite parameters abort with the iteration number.
DmdReport train_dmd(const ToyScoreNet& teacher, const DmdOptions& options);

// KL(q||p) over an 8x8 grid on [-6,6]^2: q from the samples (clamped into
// edge bins), p from the mixture's analytic bin masses.
double mixture_grid_kl(std::span<const Point> samples);

std::string dmd_report_json(const DmdReport& report);
std::string dmd_scatter_csv(const DmdReport& report);

}  // namespace streamdiff
