#include "fip/training.hpp"

#include "fip/seed.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace fip {

void TrainConfig::validate() const
{
    if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0))
        throw Error(Errc::config_error, "lr must be >= 0 and momentum in [0, 1)");
    if (epochs < 0 || batch_size < 1)
        throw Error(Errc::config_error, "epochs must be >= 0 and batch_size >= 1");
}

Eigen::VectorXd init_weights(const NetworkSpec& spec, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(spec.parameter_count());
    for (Index l = 0; l < spec.num_layers(); ++l) {
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in(l)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        const Index count = spec.fan_in(l) * spec.fan_out(l);
        for (Index i = 0; i < count; ++i)
            w(spec.weight_offset(l) + i) = dist(rng);
        if (spec.use_bias()) {
            const double bias_bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in(l)));
            std::uniform_real_distribution<double> bias_dist(-bias_bound, bias_bound);
            for (Index i = 0; i < spec.fan_out(l); ++i)
                w(spec.bias_offset(l) + i) = bias_dist(rng);
        }
    }
    return w;
}

Index updates_per_epoch(const BatchXd& data, const TrainConfig& cfg)
{
    return (data.size() + cfg.batch_size - 1) / cfg.batch_size;
}

Eigen::VectorXd sgd_updates(const NetworkSpec& spec, Eigen::VectorXd w, const BatchXd& data, const TrainConfig& cfg,
                            Index updates, const UpdateObserver& on_update)
{
    cfg.validate();
    check_batch(spec, data, true);
    check_weights(spec, w);

    std::mt19937_64 rng(derive_seed(cfg.seed, 1));
    std::vector<Index> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), Index{0});
    Eigen::VectorXd velocity = Eigen::VectorXd::Zero(w.size());
    Eigen::VectorXd last_finite = w;

    Index cursor = data.size();
    BatchXd mb;
    mb.task_id = data.task_id;
    mb.labels.emplace();
    for (Index u = 1; u <= updates; ++u) {
        if (cursor >= data.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const Index take = std::min(cfg.batch_size, data.size() - cursor);
        mb.inputs.resize(take, data.inputs.cols());
        mb.labels->resize(static_cast<std::size_t>(take));
        for (Index i = 0; i < take; ++i) {
            const Index src = order[static_cast<std::size_t>(cursor + i)];
            mb.inputs.row(i) = data.inputs.row(src);
            (*mb.labels)[static_cast<std::size_t>(i)] = (*data.labels)[static_cast<std::size_t>(src)];
        }
        cursor += take;

        const auto [loss, grad] = loss_and_grad(spec, w, mb, Loss::cross_entropy);
        if (!std::isfinite(loss) || !grad.allFinite())
            throw TrainingDiverged("loss became non-finite at update " + std::to_string(u), last_finite);
        velocity = cfg.momentum * velocity - cfg.lr * grad;
        w += velocity;
        if (!w.allFinite())
            throw TrainingDiverged("weights became non-finite at update " + std::to_string(u), last_finite);
        last_finite = w;
        if (on_update)
            on_update(u, w);
    }
    return w;
}

Eigen::VectorXd train(const NetworkSpec& spec, Eigen::VectorXd w, const BatchXd& data, const TrainConfig& cfg,
                      RunLog* log, const BatchXd* test, const std::string& phase, const UpdateObserver& on_epoch)
{
    cfg.validate();
    const Index per_epoch = updates_per_epoch(data, cfg);
    const auto start = std::chrono::steady_clock::now();
    auto observer = [&](Index u, const Eigen::VectorXd& current) {
        if (u % per_epoch != 0)
            return;
        if (on_epoch)
            on_epoch(u / per_epoch, current);
        if (!log)
            return;
        Json rec = {{"epoch", u / per_epoch},
                    {"step", u},
                    {"train_loss", loss_and_grad(spec, current, data).loss},
                    {"train_accuracy", accuracy(spec, current, data)}};
        if (test)
            rec["test_accuracy"] = accuracy(spec, current, *test);
        rec["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        log->append(phase, std::move(rec));
    };
    return sgd_updates(spec, std::move(w), data, cfg, per_epoch * cfg.epochs, observer);
}

Eigen::VectorXd train_base(const NetworkSpec& spec, const BatchXd& data, const TrainConfig& cfg, RunLog* log,
                           const BatchXd* test, const std::string& phase, const UpdateObserver& on_epoch)
{
    return train(spec, init_weights(spec, cfg.seed), data, cfg, log, test, phase, on_epoch);
}

} // namespace fip
