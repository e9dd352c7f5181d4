#include "fip/path.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace fip {

void PathConfig::validate() const
{
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
        throw Error(Errc::invalid_argument, "epsilon must be positive");
    if (!(beta >= 0.0))
        throw Error(Errc::invalid_argument, "beta must be non-negative");
    if (n_steps < 1 || inner_iters < 1 || n_candidates < 1 || anchor_batch_size < 1 || persist_stride < 1)
        throw Error(Errc::invalid_argument, "path counts must be >= 1");
    if (inner_lr && !(*inner_lr > 0.0))
        throw Error(Errc::invalid_argument, "inner_lr must be positive");
}

double PathConfig::initial_step() const
{
    return inner_lr.value_or(0.1 * std::sqrt(epsilon));
}

double relative_epsilon(const Eigen::VectorXd& w0, double relative)
{
    const double step = relative * w0.norm();
    return step * step;
}

std::vector<std::size_t> FIPath::persisted_indices() const
{
    std::vector<std::size_t> out;
    const auto stride = static_cast<std::size_t>(config.persist_stride);
    for (std::size_t i = 0; i < steps.size(); ++i)
        if ((i + 1) % stride == 0 || i + 1 == steps.size())
            out.push_back(i);
    return out;
}

namespace {

// Objective on the sphere expressed through q = ||P theta||^2 and the linear term
// <theta, g>, so that a trial point on the great circle costs only scalars.
struct SphereProblem {
    enum class Kind { invariant, geodesic };

    const MetricEvaluation<double>& me;
    Kind kind = Kind::invariant;
    double epsilon = 0.0;
    const Eigen::VectorXd* grad = nullptr; // null when the linear term is absent
    double q_scale = 1.0;
    double lin_coef = 0.0;
    double v0 = 0.0;

    double value(double q, double lin) const
    {
        if (kind == Kind::geodesic)
            return (q - v0) * (q - v0);
        return q / q_scale + lin_coef * lin;
    }

    Eigen::VectorXd gradient(const Eigen::MatrixXd& p_theta, double q) const
    {
        Eigen::VectorXd g = me.pull_back(p_theta);
        if (kind == Kind::geodesic)
            return (4.0 * (q - v0)) * g;
        g *= 2.0 / q_scale;
        if (grad)
            g += lin_coef * *grad;
        return g;
    }
};

struct Refined {
    Eigen::VectorXd theta;
    double initial = 0.0;
    double final = 0.0;
    int iterations = 0;
};

Refined refine_on_sphere(const SphereProblem& prob, Eigen::VectorXd theta0, const PathConfig& cfg)
{
    const double eps = prob.epsilon;
    const double radius = std::sqrt(eps);
    const double max_step = 4.0 * radius;
    const double min_step = 1e-14 * radius;

    Eigen::VectorXd theta = theta0;
    Eigen::MatrixXd p_theta = prob.me.push_forward(theta);
    double q = p_theta.squaredNorm();
    double lin = prob.grad ? theta.dot(*prob.grad) : 0.0;
    double f = prob.value(q, lin);
    const double f0 = f;
    double step = cfg.initial_step();

    int it = 0;
    for (; it < cfg.inner_iters; ++it) {
        const Eigen::VectorXd g = prob.gradient(p_theta, q);
        Eigen::VectorXd r = g - (g.dot(theta) / eps) * theta;
        const double rn = r.norm();
        if (!(rn > 0.0) || !std::isfinite(rn))
            break;
        const Eigen::VectorXd d = r / rn;
        const Eigen::MatrixXd p_d = prob.me.push_forward(d);
        const double b = (p_theta.array() * p_d.array()).sum();
        const double c = p_d.squaredNorm();
        const double td = theta.dot(d);
        const double lin_d = prob.grad ? d.dot(*prob.grad) : 0.0;

        bool accepted = false;
        while (step >= min_step) {
            const double norm_sq = eps - 2.0 * step * td + step * step;
            const double s = std::sqrt(eps / norm_sq);
            const double q_new = s * s * (q - 2.0 * step * b + step * step * c);
            const double lin_new = s * (lin - step * lin_d);
            const double f_new = prob.value(q_new, lin_new);
            if (f_new < f) {
                theta = s * (theta - step * d);
                p_theta = s * (p_theta - step * p_d);
                q = q_new;
                lin = lin_new;
                f = f_new;
                step = std::min(2.0 * step, max_step);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted)
            break;
    }

    // Re-evaluate exactly at the (renormalized) final iterate.
    theta *= radius / theta.norm();
    const double q_final = prob.me.output_distance_sq(theta);
    const double lin_final = prob.grad ? theta.dot(*prob.grad) : 0.0;
    const double f_final = prob.value(q_final, lin_final);
    if (!(f_final <= f0))
        return {std::move(theta0), f0, f0, it};
    return {std::move(theta), f0, f_final, it};
}

std::vector<Eigen::VectorXd> sphere_candidates(Index n, int count, double epsilon, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Eigen::VectorXd> out;
    out.reserve(static_cast<std::size_t>(count));
    const double radius = std::sqrt(epsilon);
    while (static_cast<int>(out.size()) < count) {
        Eigen::VectorXd v(n);
        for (Index i = 0; i < n; ++i)
            v(i) = normal(rng);
        const double norm = v.norm();
        if (norm > 0.0)
            out.push_back(v * (radius / norm));
    }
    return out;
}

DirectionResult solve_direction(const SphereProblem& prob, const std::vector<Eigen::VectorXd>& candidates,
                                const PathConfig& cfg)
{
    DirectionResult best;
    best.diagnostics.final_objective = std::numeric_limits<double>::infinity();
    best.diagnostics.q_scale = prob.q_scale;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        Refined r = refine_on_sphere(prob, candidates[i], cfg);
        best.diagnostics.candidate_objectives.push_back(r.final);
        if (r.final < best.diagnostics.final_objective || best.theta.size() == 0) {
            best.theta = std::move(r.theta);
            best.diagnostics.initial_objective = r.initial;
            best.diagnostics.final_objective = r.final;
            best.diagnostics.candidate = static_cast<int>(i);
            best.diagnostics.iterations = r.iterations;
        }
    }
    return best;
}

void check_direction_inputs(const MetricEvaluation<double>& me, const std::optional<Eigen::VectorXd>& grad,
                            const PathConfig& cfg)
{
    cfg.validate();
    if (grad) {
        if (grad->size() != me.dimension())
            throw Error(Errc::dimension_mismatch, "objective gradient length differs from parameter count");
        if (!grad->allFinite())
            throw Error(Errc::non_finite, "objective gradient has non-finite entries");
    }
}

} // namespace

DirectionResult fip_direction(const MetricEvaluation<double>& me, const std::optional<Eigen::VectorXd>& grad,
                              const PathConfig& cfg)
{
    check_direction_inputs(me, grad, cfg);
    SphereProblem prob{me};
    prob.epsilon = cfg.epsilon;

    auto candidates = sphere_candidates(me.dimension(), cfg.n_candidates, cfg.epsilon, cfg.seed);
    const double gnorm = grad ? grad->norm() : 0.0;
    if (grad && cfg.beta > 0.0 && gnorm > 0.0) {
        Eigen::VectorXd warm = -*grad * (std::sqrt(cfg.epsilon) / gnorm);
        const double q_warm = me.output_distance_sq(warm);
        prob.grad = &*grad;
        prob.q_scale = q_warm > std::numeric_limits<double>::min() ? q_warm : 1.0;
        prob.lin_coef = cfg.beta / (std::sqrt(cfg.epsilon) * gnorm);
        candidates.push_back(std::move(warm));
    }
    return solve_direction(prob, candidates, cfg);
}

BatchXd anchor_subsample(const BatchXd& batch, Index size, std::uint64_t seed)
{
    if (batch.size() <= size)
        return batch;
    std::vector<Index> idx(static_cast<std::size_t>(batch.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < size; ++i) {
        std::uniform_int_distribution<Index> pick(i, batch.size() - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    idx.resize(static_cast<std::size_t>(size));
    std::sort(idx.begin(), idx.end());

    BatchXd out;
    out.task_id = batch.task_id;
    out.inputs.resize(size, batch.inputs.cols());
    if (batch.labels)
        out.labels.emplace();
    for (Index i = 0; i < size; ++i) {
        const Index src = idx[static_cast<std::size_t>(i)];
        out.inputs.row(i) = batch.inputs.row(src);
        if (batch.labels)
            out.labels->push_back((*batch.labels)[static_cast<std::size_t>(src)]);
    }
    return out;
}

namespace {

// Distinct from the candidate stream so the anchor does not correlate with candidates.
std::uint64_t anchor_seed(std::uint64_t seed)
{
    return seed ^ 0x9e3779b97f4a7c15ULL;
}

PathStep step_from(const MetricEvaluation<double>& me, const Eigen::VectorXd& w, DirectionResult dir,
                   const ObjectiveValue& obj, int t)
{
    PathStep step;
    step.t = t;
    step.g_norm_sq = me.output_distance_sq(dir.theta);
    step.obj_alignment = obj.grad ? dir.theta.dot(*obj.grad) : 0.0;
    step.secondary_loss = obj.loss;
    step.w = w + dir.theta;
    step.theta_star = std::move(dir.theta);
    step.diagnostics = std::move(dir.diagnostics);
    return step;
}

} // namespace

PathStep fip_step(const NetworkSpec& spec, const Eigen::VectorXd& w, const BatchXd& metric_batch,
                  const ObjectiveSpec& objective, const PathConfig& cfg, int t)
{
    cfg.validate();
    check_weights(spec, w);
    MetricEvaluation<double> me(spec, w, anchor_subsample(metric_batch, cfg.anchor_batch_size, anchor_seed(cfg.seed)),
                                cfg.output_mode, cfg.metric_tasks);
    const ObjectiveValue obj = objective_grad(objective, spec, w);
    return step_from(me, w, fip_direction(me, obj.grad, cfg), obj, t);
}

FIPath sample_path(const NetworkSpec& spec, const Eigen::VectorXd& w0, const BatchXd& metric_batch,
                   const ObjectiveSpec& objective, const PathConfig& cfg)
{
    return sample_path(spec, w0, metric_batch, [&](int) { return objective; }, cfg);
}

FIPath sample_path(const NetworkSpec& spec, const Eigen::VectorXd& w0, const BatchXd& metric_batch,
                   const std::function<ObjectiveSpec(int)>& objective_at, const PathConfig& cfg,
                   const StepObserver& on_step)
{
    cfg.validate();
    check_weights(spec, w0);
    const BatchXd anchor = anchor_subsample(metric_batch, cfg.anchor_batch_size, anchor_seed(cfg.seed));

    FIPath path;
    path.spec = spec;
    path.w0 = w0;
    path.config = cfg;
    path.provenance["anchor_rows"] = std::to_string(anchor.size());
    path.provenance["anchor_seed"] = std::to_string(anchor_seed(cfg.seed));
    path.steps.reserve(static_cast<std::size_t>(cfg.n_steps));

    for (int t = 0; t < cfg.n_steps; ++t) {
        PathStep step;
        try {
            step = fip_step(spec, path.endpoint(), anchor, objective_at(t), cfg, t);
        } catch (const Error& e) {
            if (e.code() != Errc::non_finite)
                throw;
            throw PathAborted(std::string("step ") + std::to_string(t) + ": " + e.what(), std::move(path));
        }
        if (!step.w.allFinite())
            throw PathAborted("path produced non-finite weights at step " + std::to_string(t), std::move(path));
        path.steps.push_back(std::move(step));
        if (on_step)
            on_step(path.steps.back());
    }
    return path;
}

PathStep geodesic_step(const MetricEvaluation<double>& me, const Eigen::VectorXd& w, double v0,
                       const PathConfig& cfg)
{
    check_direction_inputs(me, std::nullopt, cfg);
    if (!(v0 >= 0.0))
        throw Error(Errc::invalid_argument, "target velocity must be non-negative");
    if (w.size() != me.dimension())
        throw Error(Errc::dimension_mismatch, "weight length differs from metric dimension");
    SphereProblem prob{me};
    prob.kind = SphereProblem::Kind::geodesic;
    prob.epsilon = cfg.epsilon;
    prob.v0 = v0;
    const auto candidates = sphere_candidates(me.dimension(), cfg.n_candidates, cfg.epsilon, cfg.seed);
    return step_from(me, w, solve_direction(prob, candidates, cfg), ObjectiveValue{}, 0);
}

} // namespace fip
