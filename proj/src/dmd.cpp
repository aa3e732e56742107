#include "streamdiff/dmd.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "streamdiff/diffusion.hpp"
#include "streamdiff/errors.hpp"

namespace streamdiff {

Point sample_mixture(Rng& rng) {
    const double mean = rng.next_unit() < 0.5 ? -2.0 : 2.0;
    return {mean + static_cast<double>(rng.next_normal()),
            static_cast<double>(rng.next_normal())};
}

// ---------------------------------------------------------------------------
// ToyMlp
// ---------------------------------------------------------------------------

ToyMlp ToyMlp::init(int in_dim, int hidden, int out_dim, Rng& rng) {
    if (in_dim <= 0 || hidden <= 0 || out_dim <= 0) {
        throw ArgumentError("perceptron extents must be positive");
    }
    ToyMlp m;
    m.in_dim  = in_dim;
    m.hidden  = hidden;
    m.out_dim = out_dim;
    m.params.resize(m.param_count());
    std::size_t at = 0;
    auto fill = [&](std::size_t count, int fan_in) {
        const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < count; ++i) {
            m.params[at++] = static_cast<double>(rng.next_normal()) * std;
        }
    };
    auto skip = [&](std::size_t count) { at += count; };  // biases stay zero
    fill(static_cast<std::size_t>(in_dim) * hidden, in_dim);
    skip(static_cast<std::size_t>(hidden));
    fill(static_cast<std::size_t>(hidden) * hidden, hidden);
    skip(static_cast<std::size_t>(hidden));
    fill(static_cast<std::size_t>(hidden) * out_dim, hidden);
    skip(static_cast<std::size_t>(out_dim));
    return m;
}

std::size_t ToyMlp::param_count() const {
    const std::size_t h = static_cast<std::size_t>(hidden);
    return static_cast<std::size_t>(in_dim) * h + h + h * h + h +
           h * static_cast<std::size_t>(out_dim) + static_cast<std::size_t>(out_dim);
}

void ToyMlp::forward(std::span<const double> x, Trace& tr) const {
    const std::size_t h = static_cast<std::size_t>(hidden);
    const double* w1 = params.data();
    const double* b1 = w1 + static_cast<std::size_t>(in_dim) * h;
    const double* w2 = b1 + h;
    const double* b2 = w2 + h * h;
    const double* w3 = b2 + h;
    const double* b3 = w3 + h * static_cast<std::size_t>(out_dim);

    tr.x.assign(x.begin(), x.end());
    tr.a1.assign(h, 0.0);
    tr.a2.assign(h, 0.0);
    tr.y.assign(static_cast<std::size_t>(out_dim), 0.0);

    for (std::size_t j = 0; j < h; ++j) {
        double z = b1[j];
        for (int i = 0; i < in_dim; ++i) z += x[static_cast<std::size_t>(i)] * w1[i * hidden + j];
        tr.a1[j] = std::tanh(z);
    }
    for (std::size_t k = 0; k < h; ++k) {
        double z = b2[k];
        for (std::size_t j = 0; j < h; ++j) z += tr.a1[j] * w2[j * h + k];
        tr.a2[k] = std::tanh(z);
    }
    for (int o = 0; o < out_dim; ++o) {
        double z = b3[o];
        for (std::size_t k = 0; k < h; ++k) z += tr.a2[k] * w3[k * static_cast<std::size_t>(out_dim) + o];
        tr.y[static_cast<std::size_t>(o)] = z;
    }
}

void ToyMlp::backward(const Trace& tr, std::span<const double> dy, std::span<double> grad,
                      std::span<double> dx) const {
    const std::size_t h = static_cast<std::size_t>(hidden);
    const std::size_t o_w1 = 0;
    const std::size_t o_b1 = o_w1 + static_cast<std::size_t>(in_dim) * h;
    const std::size_t o_w2 = o_b1 + h;
    const std::size_t o_b2 = o_w2 + h * h;
    const std::size_t o_w3 = o_b2 + h;
    const std::size_t o_b3 = o_w3 + h * static_cast<std::size_t>(out_dim);

    std::vector<double> dz2(h, 0.0), dz1(h, 0.0);
    for (std::size_t k = 0; k < h; ++k) {
        double da = 0.0;
        for (int o = 0; o < out_dim; ++o) {
            const double g = dy[static_cast<std::size_t>(o)];
            grad[o_w3 + k * static_cast<std::size_t>(out_dim) + static_cast<std::size_t>(o)] +=
                tr.a2[k] * g;
            da += params[o_w3 + k * static_cast<std::size_t>(out_dim) + static_cast<std::size_t>(o)] * g;
        }
        dz2[k] = da * (1.0 - tr.a2[k] * tr.a2[k]);
    }
    for (int o = 0; o < out_dim; ++o) {
        grad[o_b3 + static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(o)];
    }
    for (std::size_t j = 0; j < h; ++j) {
        double da = 0.0;
        for (std::size_t k = 0; k < h; ++k) {
            grad[o_w2 + j * h + k] += tr.a1[j] * dz2[k];
            da += params[o_w2 + j * h + k] * dz2[k];
        }
        dz1[j] = da * (1.0 - tr.a1[j] * tr.a1[j]);
    }
    for (std::size_t k = 0; k < h; ++k) grad[o_b2 + k] += dz2[k];
    for (int i = 0; i < in_dim; ++i) {
        for (std::size_t j = 0; j < h; ++j) {
            grad[o_w1 + static_cast<std::size_t>(i) * h + j] +=
                tr.x[static_cast<std::size_t>(i)] * dz1[j];
        }
    }
    for (std::size_t j = 0; j < h; ++j) grad[o_b1 + j] += dz1[j];
    if (!dx.empty()) {
        for (int i = 0; i < in_dim; ++i) {
            double d = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
                d += params[o_w1 + static_cast<std::size_t>(i) * h + j] * dz1[j];
            }
            dx[static_cast<std::size_t>(i)] = d;
        }
    }
}

// ---------------------------------------------------------------------------
// Score net and generator
// ---------------------------------------------------------------------------

ToyScoreNet ToyScoreNet::init(int hidden, Rng& rng) {
    return ToyScoreNet{ToyMlp::init(3, hidden, 2, rng)};
}

Point ToyScoreNet::predict(const Point& x_t, int t) const {
    const double in[3] = {x_t[0], x_t[1], static_cast<double>(sigma_of(t))};
    ToyMlp::Trace tr;
    net.forward(in, tr);
    return {tr.y[0], tr.y[1]};
}

ToyGenerator ToyGenerator::init(int hidden, Rng& rng) {
    return ToyGenerator{ToyMlp::init(2, hidden, 2, rng)};
}

Point ToyGenerator::sample(const Point& eps) const {
    ToyMlp::Trace tr;
    net.forward(eps, tr);
    return {tr.y[0], tr.y[1]};
}

// ---------------------------------------------------------------------------
// Teacher training
// ---------------------------------------------------------------------------

namespace {

// 10% exactly clean so the identity-at-zero behaviour is trained, otherwise
// sub-steps with the schedule-sampling probability, main steps with the rest.
int sample_training_t(Rng& rng) {
    if (rng.next_unit() < 0.1) return 0;
    const auto& steps = rng.next_unit() < kMciNoiseProbability ? kSubSteps : kMainSteps;
    return steps[static_cast<std::size_t>(rng.next_u64() % steps.size())];
}

int sample_main_t(Rng& rng) {
    return kMainSteps[static_cast<std::size_t>(rng.next_u64() % kMainSteps.size())];
}

bool params_finite(const std::vector<double>& p) {
    for (double v : p) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace

ToyScoreNet train_teacher(const std::function<Point(Rng&)>& sampler, int steps, Rng& rng,
                          int hidden) {
    if (steps < 0) {
        throw ArgumentError("teacher steps must be non-negative");
    }
    ToyScoreNet teacher = ToyScoreNet::init(hidden, rng);
    constexpr int kBatch = 64;
    std::vector<double> grad(teacher.net.param_count());
    ToyMlp::Trace tr;
    for (int step = 0; step < steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int b = 0; b < kBatch; ++b) {
            const Point x0 = sampler(rng);
            const int t    = sample_training_t(rng);
            const double s = static_cast<double>(sigma_of(t));
            const double e0 = static_cast<double>(rng.next_normal());
            const double e1 = static_cast<double>(rng.next_normal());
            const double in[3] = {(1.0 - s) * x0[0] + s * e0, (1.0 - s) * x0[1] + s * e1, s};
            teacher.net.forward(in, tr);
            const double dy[2] = {2.0 * (tr.y[0] - x0[0]) / kBatch,
                                  2.0 * (tr.y[1] - x0[1]) / kBatch};
            teacher.net.backward(tr, dy, grad);
        }
        const double lr = 0.005 + 0.045 * (1.0 - static_cast<double>(step) / steps);
        for (std::size_t i = 0; i < grad.size(); ++i) {
            teacher.net.params[i] -= lr * grad[i];
        }
    }
    return teacher;
}

// ---------------------------------------------------------------------------
// Distillation gradient
// ---------------------------------------------------------------------------

double surrogate_value(const ToyGenerator& gen, std::span<const Point> eps,
                       std::span<const Point> d) {
    if (eps.size() != d.size()) {
        throw ArgumentError("one direction per noise sample");
    }
    ToyMlp::Trace tr;
    double value = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        gen.net.forward(eps[i], tr);
        value += d[i][0] * tr.y[0] + d[i][1] * tr.y[1];
    }
    return value / static_cast<double>(eps.size());
}

std::vector<double> surrogate_grad(const ToyGenerator& gen, std::span<const Point> eps,
                                   std::span<const Point> d) {
    if (eps.size() != d.size()) {
        throw ArgumentError("one direction per noise sample");
    }
    std::vector<double> grad(gen.net.param_count());
    ToyMlp::Trace tr;
    const double inv_n = 1.0 / static_cast<double>(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        gen.net.forward(eps[i], tr);
        const double dy[2] = {d[i][0] * inv_n, d[i][1] * inv_n};
        gen.net.backward(tr, dy, grad);
    }
    return grad;
}

DmdGrad dmd_generator_grad(const ToyGenerator& gen, const ToyScoreNet& teacher,
                           const ToyScoreNet& fake, std::span<const Point> eps, Rng& rng) {
    DmdGrad out;
    out.d.reserve(eps.size());
    out.t.reserve(eps.size());
    for (const Point& e : eps) {
        const Point x = gen.sample(e);
        const int t   = sample_main_t(rng);
        const double s = static_cast<double>(sigma_of(t));
        const Point x_t = {(1.0 - s) * x[0] + s * static_cast<double>(rng.next_normal()),
                           (1.0 - s) * x[1] + s * static_cast<double>(rng.next_normal())};
        const Point real = teacher.predict(x_t, t);
        const Point fk   = fake.predict(x_t, t);
        out.d.push_back({fk[0] - real[0], fk[1] - real[1]});
        out.t.push_back(t);
    }
    out.grad = surrogate_grad(gen, eps, out.d);
    return out;
}

// ---------------------------------------------------------------------------
// KL estimator
// ---------------------------------------------------------------------------

namespace {

constexpr int kBins = 8;
constexpr double kLo = -6.0, kHi = 6.0;

double normal_cdf(double z) {
    return 0.5 * std::erfc(-z * 0.7071067811865476);
}

int bin_of(double v) {
    const double w = (kHi - kLo) / kBins;
    int i = static_cast<int>(std::floor((v - kLo) / w));
    if (i < 0) i = 0;
    if (i >= kBins) i = kBins - 1;
    return i;
}

}  // namespace

double mixture_grid_kl(std::span<const Point> samples) {
    if (samples.empty()) {
        throw ArgumentError("KL estimate needs samples");
    }
    const double w = (kHi - kLo) / kBins;
    std::array<double, kBins * kBins> q{}, p{};
    for (const Point& s : samples) {
        q[static_cast<std::size_t>(bin_of(s[0]) * kBins + bin_of(s[1]))] += 1.0;
    }
    for (double& v : q) v /= static_cast<double>(samples.size());

    double total = 0.0;
    for (int i = 0; i < kBins; ++i) {
        const double xa = kLo + i * w, xb = xa + w;
        const double px_neg = normal_cdf(xb + 2.0) - normal_cdf(xa + 2.0);
        const double px_pos = normal_cdf(xb - 2.0) - normal_cdf(xa - 2.0);
        for (int j = 0; j < kBins; ++j) {
            const double ya = kLo + j * w, yb = ya + w;
            const double py = normal_cdf(yb) - normal_cdf(ya);
            const double mass = 0.5 * px_neg * py + 0.5 * px_pos * py;
            p[static_cast<std::size_t>(i * kBins + j)] = mass;
            total += mass;
        }
    }
    for (double& v : p) v /= total;

    double kl = 0.0;
    for (std::size_t b = 0; b < q.size(); ++b) {
        if (q[b] > 0.0) kl += q[b] * std::log(q[b] / p[b]);
    }
    return kl;
}

// ---------------------------------------------------------------------------
// Distillation loop
// ---------------------------------------------------------------------------

DmdReport train_dmd(const ToyScoreNet& teacher, const DmdOptions& options) {
    if (options.iterations < 0 || options.batch < 1 || options.fake_every < 1 ||
        options.eval_samples < 1) {
        throw ArgumentError("distillation options out of range");
    }
    Rng master(options.seed);
    Rng init_rng = master.fork("generator-init");

    DmdReport report;
    report.generator = ToyGenerator::init(options.hidden, init_rng);
    report.fake      = teacher;  // online score starts at the teacher

    Rng gen_rng  = master.fork("generator-batch");
    Rng fake_rng = master.fork("fake-batch");

    auto evaluate = [&](std::vector<Point>* keep) {
        Rng eval_rng = master.fork("eval");
        std::vector<Point> samples;
        samples.reserve(static_cast<std::size_t>(options.eval_samples));
        for (int i = 0; i < options.eval_samples; ++i) {
            const Point e = {static_cast<double>(eval_rng.next_normal()),
                             static_cast<double>(eval_rng.next_normal())};
            samples.push_back(report.generator.sample(e));
        }
        if (keep != nullptr) *keep = samples;
        return samples;
    };

    {
        auto samples       = evaluate(nullptr);
        report.kl_initial  = mixture_grid_kl(samples);
        report.kl_trajectory.emplace_back(0, report.kl_initial);
    }

    std::vector<Point> eps(static_cast<std::size_t>(options.batch));
    std::vector<double> fake_grad(report.fake.net.param_count());
    ToyMlp::Trace tr;
    const std::int64_t eval_every =
        std::max<std::int64_t>(1, options.iterations / std::max(1, options.eval_points));

    for (int iter = 1; iter <= options.iterations; ++iter) {
        for (Point& e : eps) {
            e = {static_cast<double>(gen_rng.next_normal()),
                 static_cast<double>(gen_rng.next_normal())};
        }
        DmdGrad g = dmd_generator_grad(report.generator, teacher, report.fake, eps, gen_rng);
        for (std::size_t i = 0; i < g.grad.size(); ++i) {
            report.generator.net.params[i] -= options.lr_generator * g.grad[i];
        }
        ++report.generator_updates;

        if (iter % options.fake_every == 0) {
            std::fill(fake_grad.begin(), fake_grad.end(), 0.0);
            for (int b = 0; b < options.batch; ++b) {
                const Point e = {static_cast<double>(fake_rng.next_normal()),
                                 static_cast<double>(fake_rng.next_normal())};
                const Point x = report.generator.sample(e);  // detached regression target
                const int t   = sample_main_t(fake_rng);
                const double s = static_cast<double>(sigma_of(t));
                const double in[3] = {
                    (1.0 - s) * x[0] + s * static_cast<double>(fake_rng.next_normal()),
                    (1.0 - s) * x[1] + s * static_cast<double>(fake_rng.next_normal()), s};
                report.fake.net.forward(in, tr);
                const double dy[2] = {2.0 * (tr.y[0] - x[0]) / options.batch,
                                      2.0 * (tr.y[1] - x[1]) / options.batch};
                report.fake.net.backward(tr, dy, fake_grad);
            }
            for (std::size_t i = 0; i < fake_grad.size(); ++i) {
                report.fake.net.params[i] -= options.lr_fake * fake_grad[i];
            }
            ++report.fake_updates;
        }

        if (!params_finite(report.generator.net.params) ||
            !params_finite(report.fake.net.params)) {
            throw TrainingError("distillation diverged at iteration " + std::to_string(iter));
        }

        if (iter % eval_every == 0 || iter == options.iterations) {
            auto samples = evaluate(nullptr);
            report.kl_trajectory.emplace_back(iter, mixture_grid_kl(samples));
        }
    }

    auto samples    = evaluate(&report.final_samples);
    report.kl_final = mixture_grid_kl(samples);
    double mx = 0.0, my = 0.0;
    for (const Point& s : samples) {
        mx += s[0];
        my += s[1];
    }
    report.sample_mean = {mx / static_cast<double>(samples.size()),
                          my / static_cast<double>(samples.size())};
    return report;
}

std::string dmd_report_json(const DmdReport& report) {
    nlohmann::json j;
    j["generator_updates"] = report.generator_updates;
    j["fake_updates"]      = report.fake_updates;
    j["kl_initial"]        = report.kl_initial;
    j["kl_final"]          = report.kl_final;
    j["sample_mean"]       = {report.sample_mean[0], report.sample_mean[1]};
    nlohmann::json traj    = nlohmann::json::array();
    for (const auto& [iter, kl] : report.kl_trajectory) traj.push_back({iter, kl});
    j["kl_trajectory"] = traj;
    return j.dump(2);
}

std::string dmd_scatter_csv(const DmdReport& report) {
    std::ostringstream out;
    out << "x,y\n";
    for (const Point& s : report.final_samples) {
        out << s[0] << ',' << s[1] << '\n';
    }
    return out.str();
}

}  // namespace streamdiff
