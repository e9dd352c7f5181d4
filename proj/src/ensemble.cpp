#include "fip/ensemble.hpp"

#include <cmath>
#include <random>

namespace fip {

void Ensemble::validate() const
{
    if (members.empty())
        throw Error(Errc::invalid_argument, "ensemble has no members");
    for (const auto& w : members)
        check_weights(spec, w);
}

void AttackConfig::validate() const
{
    if (!(eps_adv >= 0.0))
        throw Error(Errc::invalid_argument, "eps_adv must be non-negative");
    if (!(step_size >= 0.0))
        throw Error(Errc::invalid_argument, "step_size must be non-negative");
    if (n_iters < 1)
        throw Error(Errc::invalid_argument, "n_iters must be >= 1");
    if (!(clamp_lo < clamp_hi))
        throw Error(Errc::invalid_argument, "clamp range must satisfy lo < hi");
}

namespace {

// Clip into [lo, hi], then nudge toward the origin until the rounded difference
// is within budget. The nudge only matters at the last ulp.
double feasible(double value, double origin, double eps, double lo, double hi)
{
    double v = std::min(std::max(value, origin - eps), origin + eps);
    v = std::min(std::max(v, lo), hi);
    while (std::abs(v - origin) > eps)
        v = std::nextafter(v, origin);
    return v;
}

} // namespace

Eigen::MatrixXd pgd_attack(const NetworkSpec& spec, const Eigen::VectorXd& w, const BatchXd& batch,
                           const AttackConfig& cfg)
{
    cfg.validate();
    check_batch(spec, batch, true);
    const Eigen::MatrixXd& x0 = batch.inputs;
    if ((x0.array() < cfg.clamp_lo).any() || (x0.array() > cfg.clamp_hi).any())
        throw Error(Errc::invalid_argument, "clean inputs lie outside the clamp range");
    if (cfg.eps_adv == 0.0)
        return x0;

    BatchXd adv = batch;
    if (cfg.n_iters > 1 && cfg.random_start) {
        std::mt19937_64 rng(cfg.seed);
        std::uniform_real_distribution<double> u(-cfg.eps_adv, cfg.eps_adv);
        for (Index i = 0; i < x0.rows(); ++i)
            for (Index j = 0; j < x0.cols(); ++j)
                adv.inputs(i, j) = feasible(x0(i, j) + u(rng), x0(i, j), cfg.eps_adv, cfg.clamp_lo, cfg.clamp_hi);
    }
    for (int it = 0; it < cfg.n_iters; ++it) {
        const Eigen::MatrixXd g = loss_input_gradients(spec, w, adv);
        for (Index i = 0; i < x0.rows(); ++i)
            for (Index j = 0; j < x0.cols(); ++j) {
                const double sign = g(i, j) > 0.0 ? 1.0 : (g(i, j) < 0.0 ? -1.0 : 0.0);
                adv.inputs(i, j) = feasible(adv.inputs(i, j) + cfg.step_size * sign, x0(i, j), cfg.eps_adv,
                                            cfg.clamp_lo, cfg.clamp_hi);
            }
    }
    return adv.inputs;
}

namespace {

Eigen::MatrixXd summed_softmax(const Ensemble& ens, const Eigen::MatrixXd& inputs, int task_id)
{
    ens.validate();
    const HeadRange& head = ens.spec.head(task_id);
    Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(inputs.rows(), head.size());
    for (const auto& w : ens.members) {
        const Eigen::MatrixXd out = forward_batch(ens.spec, w, inputs);
        for (Index i = 0; i < inputs.rows(); ++i)
            scores.row(i) += head_softmax(out.row(i).segment(head.begin, head.size())).transpose();
    }
    return scores;
}

} // namespace

EnsemblePrediction ensemble_predict(const Ensemble& ens, const Eigen::VectorXd& x, int task_id)
{
    const Eigen::MatrixXd row = x.transpose();
    const Eigen::MatrixXd scores = summed_softmax(ens, row, task_id);
    EnsemblePrediction pred;
    pred.scores = scores.row(0).transpose();
    Index best = 0;
    pred.scores.maxCoeff(&best);
    pred.label = static_cast<int>(best);
    return pred;
}

std::vector<int> ensemble_predict(const Ensemble& ens, const Eigen::MatrixXd& inputs, int task_id)
{
    const Eigen::MatrixXd scores = summed_softmax(ens, inputs, task_id);
    std::vector<int> labels(static_cast<std::size_t>(inputs.rows()));
    for (Index i = 0; i < inputs.rows(); ++i) {
        Index best = 0;
        scores.row(i).maxCoeff(&best);
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return labels;
}

double ensemble_accuracy(const Ensemble& ens, const BatchXd& batch)
{
    check_batch(ens.spec, batch, true);
    const auto labels = ensemble_predict(ens, batch.inputs, batch.task_id);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        correct += labels[i] == (*batch.labels)[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double coherence_score(const NetworkSpec& member_spec, const Eigen::VectorXd& member_w,
                       const NetworkSpec& surrogate_spec, const Eigen::VectorXd& surrogate_w, const BatchXd& batch)
{
    if (member_spec.input_dim() != surrogate_spec.input_dim())
        throw Error(Errc::dimension_mismatch, "member and surrogate disagree on input dimension");
    const Eigen::MatrixXd gm = loss_input_gradients(member_spec, member_w, batch);
    const Eigen::MatrixXd gs = loss_input_gradients(surrogate_spec, surrogate_w, batch);
    double total = 0.0;
    Index used = 0;
    for (Index i = 0; i < gm.rows(); ++i) {
        const double nm = gm.row(i).norm();
        const double ns = gs.row(i).norm();
        if (nm == 0.0 || ns == 0.0)
            continue;
        total += gm.row(i).dot(gs.row(i)) / (nm * ns);
        ++used;
    }
    if (used == 0)
        throw Error(Errc::invalid_argument, "every input has a zero gradient; coherence undefined");
    return total / static_cast<double>(used);
}

double diversity_score(const Ensemble& ens, Index layer_index, const Eigen::MatrixXd& inputs)
{
    ens.validate();
    if (layer_index < 1 || layer_index >= ens.spec.num_layers())
        throw Error(Errc::invalid_argument, "layer " + std::to_string(layer_index) + " is not a hidden layer");
    if (ens.size() < 2)
        return 0.0;
    std::vector<Eigen::MatrixXd> acts;
    acts.reserve(ens.size());
    for (const auto& w : ens.members)
        acts.push_back(forward_pass(ens.spec, w, inputs).post[static_cast<std::size_t>(layer_index)]);

    // Two all-zero activation vectors count as identical, one zero vector as orthogonal.
    auto cosine = [](const auto& a, const auto& b) {
        const double na = a.norm();
        const double nb = b.norm();
        if (na == 0.0 && nb == 0.0)
            return 1.0;
        if (na == 0.0 || nb == 0.0)
            return 0.0;
        return a.dot(b) / (na * nb);
    };
    double total = 0.0;
    const double pairs = 0.5 * static_cast<double>(ens.size() * (ens.size() - 1));
    for (Index r = 0; r < inputs.rows(); ++r) {
        double row_total = 0.0;
        for (std::size_t a = 0; a < acts.size(); ++a)
            for (std::size_t b = a + 1; b < acts.size(); ++b)
                row_total += 1.0 - cosine(acts[a].row(r), acts[b].row(r));
        total += row_total / pairs;
    }
    return total / static_cast<double>(inputs.rows());
}

Ensemble sample_ensemble_along_path(const FIPath& path, int count)
{
    const auto persisted = path.persisted_indices();
    const auto k = static_cast<std::int64_t>(persisted.size());
    if (count < 1 || count > k)
        throw Error(Errc::insufficient_steps, "path persists " + std::to_string(k) + " steps, " +
                                                  std::to_string(count) + " members requested");
    Ensemble ens;
    ens.spec = path.spec;
    ens.source = "fip-path+stride" + std::to_string(path.config.persist_stride);
    for (std::int64_t j = 0; j < count; ++j) {
        const std::int64_t pos = k - 1 - ((count - 1 - j) * k) / count;
        ens.members.push_back(path.steps[persisted[static_cast<std::size_t>(pos)]].w);
    }
    return ens;
}

} // namespace fip
