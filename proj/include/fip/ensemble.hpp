#pragma once

#include "fip/path.hpp"

#include <string>
#include <vector>

namespace fip {

/// Networks sharing one architecture.
struct Ensemble {
    NetworkSpec spec;
    std::vector<Eigen::VectorXd> members;
    std::string source = "independent-runs";

    std::size_t size() const noexcept { return members.size(); }
    void validate() const;
};

/// L-infinity PGD on the cross-entropy of the batch's head.
struct AttackConfig {
    double eps_adv = 0.03;
    double step_size = 0.0075;
    int n_iters = 10;
    std::uint64_t seed = 0;
    double clamp_lo = 0.0;
    double clamp_hi = 1.0;
    bool random_start = true; ///< only used when n_iters > 1

    void validate() const;
};

/// Adversarial inputs (N x k) crafted on the surrogate; every row stays inside the
/// eps_adv ball around its original and inside [clamp_lo, clamp_hi].
Eigen::MatrixXd pgd_attack(const NetworkSpec& spec, const Eigen::VectorXd& w, const BatchXd& batch,
                           const AttackConfig& cfg);

struct EnsemblePrediction {
    int label = 0;
    Eigen::VectorXd scores; ///< summed member softmax over the head
};

EnsemblePrediction ensemble_predict(const Ensemble& ens, const Eigen::VectorXd& x, int task_id);
std::vector<int> ensemble_predict(const Ensemble& ens, const Eigen::MatrixXd& inputs, int task_id);
double ensemble_accuracy(const Ensemble& ens, const BatchXd& batch);

/// Mean cosine similarity between input gradients of the member and the surrogate.
double coherence_score(const NetworkSpec& member_spec, const Eigen::VectorXd& member_w,
                       const NetworkSpec& surrogate_spec, const Eigen::VectorXd& surrogate_w, const BatchXd& batch);

/// Mean pairwise (1 - cosine) between member activations at hidden layer
/// `layer_index` (1 .. num_layers-1), averaged over inputs.
double diversity_score(const Ensemble& ens, Index layer_index, const Eigen::MatrixXd& inputs);

/// Picks `count` persisted steps, evenly spaced by index and ending at the endpoint.
Ensemble sample_ensemble_along_path(const FIPath& path, int count);

} // namespace fip
