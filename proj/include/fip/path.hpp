#pragma once

// Functionally invariant paths.
//
// Each step solves
//     min_theta  q(theta) + beta * <theta, grad L>   s.t.  ||theta||^2 = epsilon
// approximately: candidates are drawn uniformly on the epsilon-sphere (plus the
// rescaled negative objective gradient when one is present), each is refined by
// projected descent on the sphere, and the lowest final objective wins.

#include "fip/metric.hpp"
#include "fip/objectives.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fip {

struct PathConfig {
    double epsilon = 0.0;          ///< squared Euclidean length of every step
    double beta = 1.0;             ///< weight of the (normalized) objective term
    int n_steps = 1;
    int inner_iters = 20;
    std::optional<double> inner_lr; ///< initial step length; defaults to 0.1 * sqrt(epsilon)
    int n_candidates = 8;
    std::uint64_t seed = 0;
    Index anchor_batch_size = 256;
    int persist_stride = 10;
    OutputMode output_mode = OutputMode::pre_softmax;
    std::vector<int> metric_tasks;  ///< heads entering the metric; empty means all

    void validate() const;
    double initial_step() const;
};

/// epsilon such that sqrt(epsilon) = relative * ||w0||.
double relative_epsilon(const Eigen::VectorXd& w0, double relative = 1e-2);

struct DirectionDiagnostics {
    double initial_objective = 0.0;
    double final_objective = 0.0;
    int candidate = 0;              ///< index of the winner; n_candidates is the warm start
    int iterations = 0;
    double q_scale = 1.0;
    std::vector<double> candidate_objectives;
};

struct DirectionResult {
    Eigen::VectorXd theta;
    DirectionDiagnostics diagnostics;
};

/// Absent `grad` (or beta == 0, or a zero gradient) means L = 0.
DirectionResult fip_direction(const MetricEvaluation<double>& me, const std::optional<Eigen::VectorXd>& grad,
                              const PathConfig& cfg);

struct PathStep {
    int t = 0;
    Eigen::VectorXd w;          ///< weights after the step
    Eigen::VectorXd theta_star;
    double g_norm_sq = 0.0;     ///< q(theta_star)
    double obj_alignment = 0.0; ///< <theta_star, grad L>
    double secondary_loss = 0.0; ///< L before the step
    DirectionDiagnostics diagnostics;
};

struct FIPath {
    NetworkSpec spec;
    Eigen::VectorXd w0;
    std::vector<PathStep> steps;
    PathConfig config;
    std::map<std::string, std::string> provenance;

    const Eigen::VectorXd& endpoint() const { return steps.empty() ? w0 : steps.back().w; }
    /// Steps whose weights are persisted: every `stride`-th plus the last.
    std::vector<std::size_t> persisted_indices() const;
};

/// Thrown when a path produces non-finite weights; carries the finite prefix.
class PathAborted : public Error {
public:
    PathAborted(const std::string& message, FIPath prefix)
        : Error(Errc::non_finite, message), prefix_(std::move(prefix))
    { }

    const FIPath& prefix() const noexcept { return prefix_; }

private:
    FIPath prefix_;
};

/// Seeded subsample of at most `size` rows, kept in original row order.
BatchXd anchor_subsample(const BatchXd& batch, Index size, std::uint64_t seed);

PathStep fip_step(const NetworkSpec& spec, const Eigen::VectorXd& w, const BatchXd& metric_batch,
                  const ObjectiveSpec& objective, const PathConfig& cfg, int t = 0);

FIPath sample_path(const NetworkSpec& spec, const Eigen::VectorXd& w0, const BatchXd& metric_batch,
                   const ObjectiveSpec& objective, const PathConfig& cfg);

using StepObserver = std::function<void(const PathStep&)>;

/// Variant with a per-step objective (e.g. a sparsity schedule) and an optional
/// observer called after every accepted step.
FIPath sample_path(const NetworkSpec& spec, const Eigen::VectorXd& w0, const BatchXd& metric_batch,
                   const std::function<ObjectiveSpec(int)>& objective_at, const PathConfig& cfg,
                   const StepObserver& on_step = {});

/// Constant-velocity step: minimizes (q(theta) - v0)^2 on the epsilon-sphere.
PathStep geodesic_step(const MetricEvaluation<double>& me, const Eigen::VectorXd& w, double v0,
                       const PathConfig& cfg);

} // namespace fip
