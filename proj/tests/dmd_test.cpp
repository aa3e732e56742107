#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "streamdiff/diffusion.hpp"
#include "streamdiff/dmd.hpp"
#include "streamdiff/errors.hpp"

using namespace streamdiff;

namespace {

// Central differences in double; h small enough that truncation and roundoff
// both sit orders of magnitude under the pass threshold.
constexpr double kFdStep = 1e-6;

bool close(double a, double b, double abs_tol, double rel_tol) {
    return std::fabs(a - b) <= abs_tol + rel_tol * std::max(std::fabs(a), std::fabs(b));
}

std::vector<Point> random_points(std::size_t n, Rng& rng) {
    std::vector<Point> out(n);
    for (Point& p : out) {
        p = {static_cast<double>(rng.next_normal()), static_cast<double>(rng.next_normal())};
    }
    return out;
}

}  // namespace

TEST_CASE("backpropagation matches central finite differences") {
    Rng rng(17);
    ToyMlp net = ToyMlp::init(3, 5, 2, rng);
    const double x[3]  = {0.4, -1.1, 0.25};
    const double dy[2] = {0.7, -1.3};  // fixed linear readout: L = dy . y

    ToyMlp::Trace tr;
    std::vector<double> grad(net.param_count(), 0.0);
    std::vector<double> dx(3, 0.0);
    net.forward(x, tr);
    net.backward(tr, dy, grad, dx);

    auto loss = [&] {
        ToyMlp::Trace t2;
        net.forward(x, t2);
        return dy[0] * t2.y[0] + dy[1] * t2.y[1];
    };
    for (std::size_t i = 0; i < net.param_count(); ++i) {
        const double keep = net.params[i];
        net.params[i] = keep + kFdStep;
        const double up = loss();
        net.params[i] = keep - kFdStep;
        const double down = loss();
        net.params[i] = keep;
        const double fd = (up - down) / (2.0 * kFdStep);
        CHECK_MESSAGE(close(grad[i], fd, 1e-7, 1e-5), "param ", i, ": ", grad[i], " vs ", fd);
    }

    // Same check for the input gradient.
    double xv[3] = {x[0], x[1], x[2]};
    auto loss_x = [&] {
        ToyMlp::Trace t2;
        net.forward(xv, t2);
        return dy[0] * t2.y[0] + dy[1] * t2.y[1];
    };
    for (int i = 0; i < 3; ++i) {
        const double keep = xv[i];
        xv[i] = keep + kFdStep;
        const double up = loss_x();
        xv[i] = keep - kFdStep;
        const double down = loss_x();
        xv[i] = keep;
        const double fd = (up - down) / (2.0 * kFdStep);
        CHECK_MESSAGE(close(dx[static_cast<std::size_t>(i)], fd, 1e-7, 1e-5), "input ", i);
    }

    CHECK_THROWS_AS(ToyMlp::init(0, 4, 2, rng), ArgumentError);
}

TEST_CASE("zero teacher steps return the untouched initialization") {
    Rng a(3);
    const ToyScoreNet zero = train_teacher(sample_mixture, 0, a, 8);
    Rng b(3);
    const ToyScoreNet ref = ToyScoreNet::init(8, b);
    REQUIRE(zero.net.params.size() == ref.net.params.size());
    for (std::size_t i = 0; i < ref.net.params.size(); ++i) {
        CHECK(zero.net.params[i] == ref.net.params[i]);
    }
    Rng c(3);
    CHECK_THROWS_AS(train_teacher(sample_mixture, -1, c), ArgumentError);
}

TEST_CASE("teacher training learns to denoise the mixture") {
    Rng rng(11);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 2000, rng);
    Rng init_rng(11);
    const ToyScoreNet untrained = ToyScoreNet::init(32, init_rng);

    auto mse_at = [&](const ToyScoreNet& net, int t) {
        Rng probe(400);
        double err = 0.0;
        const int n = 256;
        for (int i = 0; i < n; ++i) {
            const Point x0 = sample_mixture(probe);
            const double s = static_cast<double>(sigma_of(t));
            const Point x_t = {(1.0 - s) * x0[0] + s * static_cast<double>(probe.next_normal()),
                               (1.0 - s) * x0[1] + s * static_cast<double>(probe.next_normal())};
            const Point y = net.predict(x_t, t);
            err += (y[0] - x0[0]) * (y[0] - x0[0]) + (y[1] - x0[1]) * (y[1] - x0[1]);
        }
        return err / n;
    };

    // Near-clean inputs reconstruct almost exactly; any noise level beats the
    // random initialization by a wide margin.
    CHECK(mse_at(teacher, 0) < 0.1);
    CHECK(mse_at(teacher, 250) < 0.5 * mse_at(untrained, 250));

    // At pure noise the input carries nothing, so the x0 prediction falls
    // toward the mixture mean, which is symmetric about x = 0.
    Rng noise(7);
    double first = 0.0;
    for (int i = 0; i < 64; ++i) {
        const Point y = teacher.predict({static_cast<double>(noise.next_normal()),
                                         static_cast<double>(noise.next_normal())},
                                        1000);
        first += y[0];
    }
    CHECK(std::fabs(first / 64.0) < 0.5);
}

TEST_CASE("identical real and fake scores give an exactly zero gradient") {
    Rng rng(23);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 200, rng, 8);
    Rng gen_rng(24);
    const ToyGenerator gen = ToyGenerator::init(8, gen_rng);
    Rng eps_rng(25);
    const std::vector<Point> eps = random_points(16, eps_rng);

    Rng grad_rng(26);
    const DmdGrad g = dmd_generator_grad(gen, teacher, teacher, eps, grad_rng);
    for (const Point& d : g.d) {
        CHECK(d[0] == 0.0);
        CHECK(d[1] == 0.0);
    }
    for (double v : g.grad) CHECK(v == 0.0);
    CHECK(g.t.size() == eps.size());
    for (int t : g.t) CHECK((t == 1000 || t == 750 || t == 500 || t == 250));
}

TEST_CASE("surrogate gradient matches finite differences on every parameter") {
    Rng rng(31);
    ToyGenerator gen = ToyGenerator::init(4, rng);
    Rng pr(32);
    const std::vector<Point> eps = random_points(8, pr);
    const std::vector<Point> d   = random_points(8, pr);

    const std::vector<double> an = surrogate_grad(gen, eps, d);
    REQUIRE(an.size() == gen.net.param_count());
    for (std::size_t i = 0; i < an.size(); ++i) {
        const double keep = gen.net.params[i];
        gen.net.params[i] = keep + kFdStep;
        const double up = surrogate_value(gen, eps, d);
        gen.net.params[i] = keep - kFdStep;
        const double down = surrogate_value(gen, eps, d);
        gen.net.params[i] = keep;
        const double fd = (up - down) / (2.0 * kFdStep);
        CHECK_MESSAGE(close(an[i], fd, 1e-7, 1e-5), "param ", i, ": ", an[i], " vs ", fd);
    }

    // The gradient is linear in the frozen directions; a power-of-two scale
    // commutes with every floating point operation involved.
    std::vector<Point> d2 = d;
    for (Point& p : d2) {
        p[0] *= 2.0;
        p[1] *= 2.0;
    }
    const std::vector<double> an2 = surrogate_grad(gen, eps, d2);
    for (std::size_t i = 0; i < an.size(); ++i) {
        CHECK(an2[i] == 2.0 * an[i]);
    }

    const std::vector<Point> short_d(4);
    CHECK_THROWS_AS(surrogate_value(gen, eps, short_d), ArgumentError);
    CHECK_THROWS_AS(surrogate_grad(gen, eps, short_d), ArgumentError);
}

TEST_CASE("distillation holds the one to five update ratio") {
    Rng rng(41);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 300, rng, 8);

    DmdOptions options;
    options.iterations   = 50;
    options.batch        = 8;
    options.hidden       = 8;
    options.eval_samples = 256;
    options.eval_points  = 5;
    options.seed         = 9;

    const DmdReport report = train_dmd(teacher, options);
    CHECK(report.generator_updates == 50);
    CHECK(report.fake_updates == 10);
    REQUIRE_FALSE(report.kl_trajectory.empty());
    CHECK(report.kl_trajectory.front().first == 0);
    CHECK(report.kl_trajectory.front().second == report.kl_initial);
    CHECK(report.kl_trajectory.back().first == 50);
    // Evaluation noise is frozen, so the trajectory's last point is the
    // final KL itself.
    CHECK(report.kl_trajectory.back().second == report.kl_final);
    CHECK(report.final_samples.size() == 256);
    CHECK(std::isfinite(report.sample_mean[0]));
    CHECK(std::isfinite(report.sample_mean[1]));

    DmdOptions bad = options;
    bad.fake_every = 0;
    CHECK_THROWS_AS(train_dmd(teacher, bad), ArgumentError);
    bad            = options;
    bad.iterations = -1;
    CHECK_THROWS_AS(train_dmd(teacher, bad), ArgumentError);
}

TEST_CASE("distillation moves the generator toward the mixture") {
    Rng rng(47);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 1200, rng, 16);

    DmdOptions options;
    options.iterations   = 600;
    options.batch        = 32;
    options.hidden       = 16;
    options.eval_samples = 2048;
    options.eval_points  = 6;
    options.seed         = 13;

    const DmdReport report = train_dmd(teacher, options);
    CHECK(report.kl_final < 0.6 * report.kl_initial);
    CHECK(std::isfinite(report.kl_final));
}

TEST_CASE("runaway learning rates abort instead of emitting garbage") {
    Rng rng(53);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 100, rng, 4);

    DmdOptions options;
    options.iterations   = 10;
    options.batch        = 4;
    options.hidden       = 4;
    options.eval_samples = 64;
    options.lr_generator = 1e200;
    options.lr_fake      = 2e199;
    options.seed         = 3;
    CHECK_THROWS_WITH_AS(train_dmd(teacher, options),
                         doctest::Contains("diverged at iteration"), TrainingError);
}

TEST_CASE("grid KL separates the mixture from a mismatched cloud") {
    Rng rng(123);
    std::vector<Point> mixture;
    for (int i = 0; i < 10000; ++i) mixture.push_back(sample_mixture(rng));
    CHECK(mixture_grid_kl(mixture) < 0.05);

    std::vector<Point> centered = random_points(10000, rng);
    CHECK(mixture_grid_kl(centered) > 0.2);

    CHECK_THROWS_AS(mixture_grid_kl({}), ArgumentError);
}

TEST_CASE("report serializers emit parseable output") {
    Rng rng(61);
    const ToyScoreNet teacher = train_teacher(sample_mixture, 100, rng, 4);
    DmdOptions options;
    options.iterations   = 5;
    options.batch        = 4;
    options.hidden       = 4;
    options.eval_samples = 32;
    const DmdReport report = train_dmd(teacher, options);

    const nlohmann::json j = nlohmann::json::parse(dmd_report_json(report));
    CHECK(j.at("generator_updates").get<std::int64_t>() == report.generator_updates);
    CHECK(j.at("fake_updates").get<std::int64_t>() == report.fake_updates);
    CHECK(j.at("kl_initial").get<double>() == doctest::Approx(report.kl_initial));
    CHECK(j.at("kl_final").get<double>() == doctest::Approx(report.kl_final));
    CHECK(j.at("kl_trajectory").size() == report.kl_trajectory.size());
    CHECK(j.at("sample_mean").size() == 2);

    const std::string csv = dmd_scatter_csv(report);
    CHECK(csv.rfind("x,y\n", 0) == 0);
    const auto lines = std::count(csv.begin(), csv.end(), '\n');
    CHECK(lines == 1 + static_cast<std::int64_t>(report.final_samples.size()));
}
