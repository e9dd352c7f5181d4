#include "catch_amalgamated.hpp"

#include "fip/data.hpp"
#include "fip/path.hpp"
#include "fip/training.hpp"
#include "support.hpp"

#include <numbers>

using namespace fip;
using fip::test::random_vector;

namespace {

BatchXd rows(std::initializer_list<std::initializer_list<double>> data)
{
    BatchXd b;
    b.inputs.resize(static_cast<Index>(data.size()), static_cast<Index>(data.begin()->size()));
    Index i = 0;
    for (const auto& r : data) {
        Index j = 0;
        for (double v : r)
            b.inputs(i, j++) = v;
        ++i;
    }
    return b;
}

PathConfig config(double epsilon, std::uint64_t seed = 1)
{
    PathConfig cfg;
    cfg.epsilon = epsilon;
    cfg.seed = seed;
    return cfg;
}

struct Trained {
    NetworkSpec spec;
    Eigen::VectorXd w;
    BatchXd data;
};

const Trained& trained_blob_net()
{
    static const Trained net = [] {
        Trained t;
        t.spec = NetworkSpec::mlp(2, {16}, 2, Activation::relu);
        t.data = gen_blobs(2, 200, 2, 6.0, 5);
        TrainConfig tc;
        tc.lr = 0.05;
        tc.epochs = 30;
        tc.seed = 6;
        t.w = train_base(t.spec, t.data, tc);
        return t;
    }();
    return net;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    return a.dot(b) / (a.norm() * b.norm());
}

} // namespace

TEST_CASE("direction on a rank-one metric lies in its null space", "[path]")
{
    const auto spec = test::linear_spec(2, 1, false);
    const Eigen::Vector2d x(1.0, 2.0);
    const MetricEvaluation<double> me(spec, Eigen::VectorXd(Eigen::Vector2d(0.5, -0.5)), rows({{1.0, 2.0}}));
    const auto cfg = config(0.04);
    const auto res = fip_direction(me, std::nullopt, cfg);
    CHECK(std::abs(x.dot(res.theta)) / (x.norm() * res.theta.norm()) < 0.05);
    CHECK(test::rel_diff(res.theta.squaredNorm(), cfg.epsilon) < 1e-6);
}

TEST_CASE("a dominant objective weight aligns the direction with the negative gradient", "[path]")
{
    const auto spec = NetworkSpec::mlp(3, {4}, 2, Activation::tanh);
    const MetricEvaluation<double> me(spec, random_vector(spec.parameter_count(), 2),
                                      test::random_batch(spec, 5, 3));
    auto cfg = config(1e-2);
    cfg.beta = 1e6;
    const Eigen::VectorXd g = random_vector(spec.parameter_count(), 4);
    const auto res = fip_direction(me, g, cfg);
    CHECK(cosine(res.theta, -g) > 0.99);
    CHECK(res.diagnostics.candidate_objectives.size() == static_cast<std::size_t>(cfg.n_candidates) + 1);
}

TEST_CASE("direction matches an exhaustive circle search in two dimensions", "[path]")
{
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    for (int instance = 0; instance < 20; ++instance) {
        const auto spec = test::linear_spec(2, 1, false);
        const BatchXd batch = rows({{unif(rng), unif(rng)}, {unif(rng), unif(rng)}, {unif(rng), unif(rng)}});
        const MetricEvaluation<double> me(spec, Eigen::VectorXd(Eigen::Vector2d(unif(rng), unif(rng))), batch);
        auto cfg = config(0.05 + 1.95 * (unif(rng) + 1.0) / 2.0, static_cast<std::uint64_t>(instance));
        cfg.beta = instance % 4 == 0 ? 0.0 : 5.0 * (unif(rng) + 1.0) / 2.0;
        const Eigen::Vector2d g(unif(rng), unif(rng));

        const Eigen::Matrix2d gram = batch.inputs.transpose() * batch.inputs / 3.0;
        const double r = std::sqrt(cfg.epsilon);
        const Eigen::Vector2d warm = -g * (r / g.norm());
        const double q_scale = cfg.beta > 0.0 ? warm.dot(gram * warm) : 1.0;
        auto objective = [&](const Eigen::Vector2d& th) {
            return th.dot(gram * th) / q_scale + cfg.beta * th.dot(g) / (r * g.norm());
        };

        double best = std::numeric_limits<double>::infinity();
        constexpr int grid = 1'000'000;
        for (int k = 0; k < grid; ++k) {
            const double a = 2.0 * std::numbers::pi * k / grid;
            best = std::min(best, objective(Eigen::Vector2d(r * std::cos(a), r * std::sin(a))));
        }
        const auto res = fip_direction(me, Eigen::VectorXd(g), cfg);
        CHECK(objective(res.theta) - best < 1e-3);
    }
}

TEST_CASE("direction rejects bad inputs", "[path]")
{
    const auto spec = test::linear_spec(2, 1, false);
    const MetricEvaluation<double> me(spec, Eigen::VectorXd(Eigen::Vector2d(1, 1)), rows({{1.0, 2.0}}));
    CHECK_THROWS_AS(fip_direction(me, std::nullopt, config(0.0)), Error);
    CHECK_THROWS_AS(fip_direction(me, std::nullopt, config(-1.0)), Error);
    Eigen::VectorXd bad = Eigen::Vector2d(1.0, std::numeric_limits<double>::infinity());
    try {
        fip_direction(me, bad, config(0.1));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::non_finite);
    }
    CHECK_THROWS_AS(fip_direction(me, Eigen::VectorXd(Eigen::VectorXd::Ones(3)), config(0.1)), Error);
}

TEST_CASE("a zero objective gradient behaves as no objective", "[path]")
{
    const auto spec = NetworkSpec::mlp(2, {3}, 2, Activation::tanh);
    const MetricEvaluation<double> me(spec, random_vector(spec.parameter_count(), 5),
                                      test::random_batch(spec, 4, 6));
    const auto cfg = config(1e-3);
    const auto a = fip_direction(me, std::nullopt, cfg);
    const auto b = fip_direction(me, Eigen::VectorXd(Eigen::VectorXd::Zero(spec.parameter_count())), cfg);
    CHECK(a.theta == b.theta);
}

TEST_CASE("null step on a linear net beats every random probe", "[path]")
{
    const auto spec = test::linear_spec(3, 2);
    const auto w = random_vector(spec.parameter_count(), 7);
    const auto batch = test::random_batch(spec, 2, 8);
    const auto cfg = config(1e-2, 9);
    const auto step = fip_step(spec, w, batch, ObjectiveSpec::none(), cfg);

    const MetricEvaluation<double> me(spec, w, batch);
    double best = std::numeric_limits<double>::infinity();
    for (std::uint64_t p = 0; p < 100; ++p) {
        Eigen::VectorXd d = random_vector(spec.parameter_count(), 1000 + p);
        d *= std::sqrt(cfg.epsilon) / d.norm();
        best = std::min(best, me.output_distance_sq(d));
    }
    CHECK(step.g_norm_sq <= best);
    CHECK(step.w == w + step.theta_star);
    CHECK(step.secondary_loss == 0.0);
}

TEST_CASE("one null step keeps a trained classifier's accuracy", "[path]")
{
    const auto& net = trained_blob_net();
    const double before = accuracy(net.spec, net.w, net.data);
    REQUIRE(before >= 0.99);
    auto cfg = config(relative_epsilon(net.w), 3);
    const auto step = fip_step(net.spec, net.w, net.data, ObjectiveSpec::none(), cfg);
    CHECK(std::abs(accuracy(net.spec, step.w, net.data) - before) < 0.01);
}

TEST_CASE("long null path travels far while preserving accuracy", "[path]")
{
    const auto& net = trained_blob_net();
    const double before = accuracy(net.spec, net.w, net.data);
    auto cfg = config(relative_epsilon(net.w), 4);
    cfg.n_steps = 50;
    cfg.n_candidates = 4;
    cfg.inner_iters = 10;
    cfg.anchor_batch_size = 128;
    const auto path = sample_path(net.spec, net.w, net.data, ObjectiveSpec::none(), cfg);
    REQUIRE(path.steps.size() == 50);
    CHECK((path.endpoint() - net.w).norm() >= 0.5 * 50 * std::sqrt(cfg.epsilon));
    CHECK(before - accuracy(net.spec, path.endpoint(), net.data) <= 0.02);
}

TEST_CASE("path steps chain exactly and respect the sphere", "[path]")
{
    const auto spec = NetworkSpec::mlp(3, {6}, 2, Activation::tanh);
    const auto w0 = random_vector(spec.parameter_count(), 10);
    auto batch = test::labeled_batch(spec, 20, 11);
    auto cfg = config(relative_epsilon(w0), 12);
    cfg.n_steps = 15;
    cfg.n_candidates = 3;
    const auto path = sample_path(spec, w0, batch, ObjectiveSpec::task_loss(batch), cfg);
    REQUIRE(path.steps.size() == 15);
    Eigen::VectorXd w = w0;
    double length = 0.0;
    for (std::size_t t = 0; t < path.steps.size(); ++t) {
        const auto& s = path.steps[t];
        CHECK(s.t == static_cast<int>(t));
        CHECK(s.w == w + s.theta_star);
        CHECK(std::abs(s.theta_star.squaredNorm() - cfg.epsilon) <= 1e-6 * cfg.epsilon);
        CHECK(s.g_norm_sq >= 0.0);
        CHECK(s.diagnostics.final_objective <= s.diagnostics.initial_objective);
        length += s.theta_star.norm();
        w = s.w;
    }
    CHECK(test::rel_diff(length, 15 * std::sqrt(cfg.epsilon)) < 1e-6);
}

TEST_CASE("paths are bit-identical under a fixed seed", "[path]")
{
    const auto spec = NetworkSpec::mlp(2, {5}, 2, Activation::relu);
    const auto w0 = random_vector(spec.parameter_count(), 13);
    const auto batch = test::labeled_batch(spec, 30, 14);
    auto cfg = config(1e-3, 15);
    cfg.n_steps = 5;
    cfg.anchor_batch_size = 10;
    const auto a = sample_path(spec, w0, batch, ObjectiveSpec::task_loss(batch), cfg);
    const auto b = sample_path(spec, w0, batch, ObjectiveSpec::task_loss(batch), cfg);
    for (std::size_t t = 0; t < a.steps.size(); ++t)
        CHECK(std::memcmp(a.steps[t].w.data(), b.steps[t].w.data(),
                          sizeof(double) * static_cast<std::size_t>(a.steps[t].w.size())) == 0);
    CHECK(a.provenance == b.provenance);
    CHECK(a.provenance.at("anchor_rows") == "10");
}

TEST_CASE("zero beta ignores the objective and null equals absent", "[path]")
{
    const auto spec = NetworkSpec::mlp(2, {5}, 2, Activation::tanh);
    const auto w0 = random_vector(spec.parameter_count(), 16);
    const auto batch = test::labeled_batch(spec, 12, 17);
    auto cfg = config(1e-3, 18);
    cfg.n_steps = 4;
    const auto none = sample_path(spec, w0, batch, ObjectiveSpec::none(), cfg);
    cfg.beta = 0.0;
    const auto loss = sample_path(spec, w0, batch, ObjectiveSpec::task_loss(batch), cfg);
    for (std::size_t t = 0; t < none.steps.size(); ++t)
        CHECK(none.steps[t].w == loss.steps[t].w);

    // Null objective reproduces a direction solved with no gradient at all.
    const MetricEvaluation<double> me(spec, w0, batch);
    cfg.beta = 1.0;
    const auto step = fip_step(spec, w0, batch, ObjectiveSpec::none(), cfg);
    CHECK(step.theta_star == fip_direction(me, std::nullopt, cfg).theta);
}

TEST_CASE("a single-step path equals one fip step", "[path]")
{
    const auto spec = NetworkSpec::mlp(2, {4}, 2, Activation::relu);
    const auto w0 = random_vector(spec.parameter_count(), 19);
    const auto batch = test::labeled_batch(spec, 40, 20);
    auto cfg = config(1e-3, 21);
    cfg.anchor_batch_size = 16;
    const auto obj = ObjectiveSpec::task_loss(batch);
    const auto path = sample_path(spec, w0, batch, obj, cfg);
    REQUIRE(path.steps.size() == 1);
    CHECK(path.steps[0].w == fip_step(spec, w0, batch, obj, cfg).w);

    cfg.n_steps = 0;
    CHECK_THROWS_AS(sample_path(spec, w0, batch, obj, cfg), Error);
    cfg.n_steps = 1;
    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(fip_step(spec, w0, batch, obj, cfg), Error);
}

TEST_CASE("non-finite objective gradients abort with the finite prefix", "[path]")
{
    const auto spec = NetworkSpec::mlp(2, {4}, 2, Activation::tanh);
    const auto w0 = random_vector(spec.parameter_count(), 22);
    const auto batch = test::random_batch(spec, 10, 23);
    auto cfg = config(1e-3, 24);
    cfg.n_steps = 5;
    // The gradient 2 (w - 1e308) overflows to -inf at step 2.
    const Eigen::VectorXd huge = Eigen::VectorXd::Constant(spec.parameter_count(), -1e308);
    auto objective_at = [&](int t) {
        return t == 2 ? ObjectiveSpec::sparsify(0.0, RefPoint::fixed_w, Eigen::VectorXd(-huge)) : ObjectiveSpec::none();
    };
    try {
        sample_path(spec, w0, batch, objective_at, cfg);
        FAIL("expected PathAborted");
    } catch (const PathAborted& e) {
        CHECK(e.code() == Errc::non_finite);
        CHECK(e.prefix().steps.size() == 2);
        CHECK(e.prefix().w0 == w0);
        CHECK(e.prefix().steps[1].w.allFinite());
    }
}

TEST_CASE("observer sees every accepted step", "[path]")
{
    const auto spec = NetworkSpec::mlp(2, {3}, 2, Activation::tanh);
    const auto w0 = random_vector(spec.parameter_count(), 25);
    auto cfg = config(1e-3, 26);
    cfg.n_steps = 6;
    std::vector<int> seen;
    sample_path(
        spec, w0, test::random_batch(spec, 8, 27), [](int) { return ObjectiveSpec::none(); }, cfg,
        [&](const PathStep& s) { seen.push_back(s.t); });
    CHECK(seen == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("geodesic step at zero velocity matches the invariant direction", "[path]")
{
    const auto spec = test::linear_spec(2, 1, false);
    const MetricEvaluation<double> me(spec, Eigen::VectorXd(Eigen::Vector2d(0.3, 0.1)),
                                      rows({{1.0, 0.2}, {-0.4, 1.0}}));
    const Eigen::VectorXd w = me.weights();
    const auto cfg = config(0.09, 28);
    const auto geo = geodesic_step(me, w, 0.0, cfg);
    const auto fip = fip_direction(me, std::nullopt, cfg);
    // Both minimize q on the sphere, so they agree up to sign.
    CHECK(std::abs(geo.theta_star.dot(fip.theta)) / cfg.epsilon > 1.0 - 1e-6);
    CHECK(test::rel_diff(geo.g_norm_sq, me.output_distance_sq(fip.theta)) < 1e-9);
    CHECK(geo.w == w + geo.theta_star);
}

TEST_CASE("geodesic step at maximal velocity aligns with the data direction", "[path]")
{
    const auto spec = test::linear_spec(2, 1, false);
    const Eigen::Vector2d x(1.0, 2.0);
    const MetricEvaluation<double> me(spec, Eigen::VectorXd(Eigen::Vector2d(1, 1)), rows({{1.0, 2.0}}));
    const auto cfg = config(0.25, 29);
    const auto geo = geodesic_step(me, me.weights(), cfg.epsilon * x.squaredNorm(), cfg);
    CHECK(std::abs(cosine(geo.theta_star, x)) > 0.99);
}

TEST_CASE("geodesic step hits an intermediate target velocity", "[path]")
{
    const auto spec = test::linear_spec(2, 1, false);
    const MetricEvaluation<double> me(spec, Eigen::VectorXd(Eigen::Vector2d(1, 1)),
                                      rows({{1.0, 0.5}, {0.2, -1.5}, {0.7, 0.7}}));
    const auto cfg = config(0.5, 30);
    const Eigen::MatrixXd g = me.metric_matrix();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g);
    const double q_min = cfg.epsilon * eig.eigenvalues()(0);
    const double q_max = cfg.epsilon * eig.eigenvalues()(1);
    for (double frac : {0.2, 0.5, 0.8}) {
        const double v0 = q_min + frac * (q_max - q_min);
        const auto geo = geodesic_step(me, me.weights(), v0, cfg);
        CHECK(std::abs(geo.g_norm_sq - v0) <= 0.05 * v0);
    }
    CHECK_THROWS_AS(geodesic_step(me, me.weights(), -1.0, cfg), Error);
}

TEST_CASE("anchor subsample is seeded and order-preserving", "[path]")
{
    BatchXd b;
    b.inputs.resize(50, 1);
    std::vector<int> labels;
    for (Index i = 0; i < 50; ++i) {
        b.inputs(i, 0) = static_cast<double>(i);
        labels.push_back(static_cast<int>(i % 3));
    }
    b.labels = labels;
    const auto a = anchor_subsample(b, 20, 5);
    REQUIRE(a.size() == 20);
    for (Index i = 1; i < 20; ++i)
        CHECK(a.inputs(i, 0) > a.inputs(i - 1, 0));
    for (Index i = 0; i < 20; ++i)
        CHECK((*a.labels)[static_cast<std::size_t>(i)] == static_cast<int>(a.inputs(i, 0)) % 3);
    CHECK(anchor_subsample(b, 20, 5).inputs == a.inputs);
    CHECK(anchor_subsample(b, 20, 6).inputs != a.inputs);
    CHECK(anchor_subsample(b, 80, 5).inputs == b.inputs);
}

TEST_CASE("persisted steps follow the stride and include the endpoint", "[path]")
{
    FIPath path;
    path.config.persist_stride = 10;
    path.steps.resize(25);
    CHECK(path.persisted_indices() == std::vector<std::size_t>{9, 19, 24});
    path.steps.resize(20);
    CHECK(path.persisted_indices() == std::vector<std::size_t>{9, 19});
}

TEST_CASE("relative epsilon scales with the weight norm", "[path]")
{
    const Eigen::VectorXd w = Eigen::Vector2d(3.0, 4.0);
    CHECK(relative_epsilon(w) == Catch::Approx(0.0025).epsilon(1e-14));
    CHECK(relative_epsilon(w, 0.1) == Catch::Approx(0.25).epsilon(1e-14));
    PathConfig cfg = config(0.04);
    CHECK(cfg.initial_step() == Catch::Approx(0.02));
}
