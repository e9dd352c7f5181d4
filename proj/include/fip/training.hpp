#pragma once

#include "fip/io.hpp"

#include <functional>

namespace fip {

/// Minibatch gradient descent with heavy-ball momentum on the cross-entropy of
/// the batch's head.
struct TrainConfig {
    double lr = 0.05;
    double momentum = 0.9;
    int epochs = 50;
    Index batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

/// He-uniform weights; biases uniform in +-1/sqrt(fan_in), so none starts at exactly zero.
Eigen::VectorXd init_weights(const NetworkSpec& spec, std::uint64_t seed);

/// Thrown when the loss becomes non-finite; carries the last finite weights.
class TrainingDiverged : public Error {
public:
    TrainingDiverged(const std::string& message, Eigen::VectorXd last_finite)
        : Error(Errc::divergence, message), last_finite_(std::move(last_finite))
    { }

    const Eigen::VectorXd& last_finite() const noexcept { return last_finite_; }

private:
    Eigen::VectorXd last_finite_;
};

/// Called after each update with the 1-based update count and current weights.
using UpdateObserver = std::function<void(Index, const Eigen::VectorXd&)>;

/// Runs exactly `updates` minibatch steps, reshuffling at every pass over the data.
Eigen::VectorXd sgd_updates(const NetworkSpec& spec, Eigen::VectorXd w, const BatchXd& data, const TrainConfig& cfg,
                            Index updates, const UpdateObserver& on_update = {});

/// Minibatch updates in one epoch for `data`.
Index updates_per_epoch(const BatchXd& data, const TrainConfig& cfg);

/// Trains from `w` for cfg.epochs epochs, logging one record per epoch to `log`
/// under `phase` (train loss/accuracy, and test accuracy when `test` is given).
/// `on_epoch` receives the epoch number and the weights at each epoch end.
Eigen::VectorXd train(const NetworkSpec& spec, Eigen::VectorXd w, const BatchXd& data, const TrainConfig& cfg,
                      RunLog* log = nullptr, const BatchXd* test = nullptr, const std::string& phase = "train",
                      const UpdateObserver& on_epoch = {});

/// init_weights followed by train.
Eigen::VectorXd train_base(const NetworkSpec& spec, const BatchXd& data, const TrainConfig& cfg,
                           RunLog* log = nullptr, const BatchXd* test = nullptr, const std::string& phase = "base",
                           const UpdateObserver& on_epoch = {});

} // namespace fip
