#pragma once

// Secondary objectives that bias a path: none, a classification loss on a new
// task, or the squared distance to a p-sparse projection of the weights.

#include "fip/network.hpp"

#include <memory>
#include <optional>
#include <string_view>
#include <vector>

namespace fip {

enum class ObjectiveKind { null, task_loss, sparsify };
enum class RefPoint { current_w, fixed_w };

std::string_view to_string(ObjectiveKind kind) noexcept;
std::string_view to_string(RefPoint ref) noexcept;
RefPoint parse_ref_point(std::string_view name);

struct ObjectiveSpec {
    ObjectiveKind kind = ObjectiveKind::null;

    // task_loss
    std::shared_ptr<const BatchXd> task_batch;

    // sparsify
    double sparsity = 0.0;
    RefPoint ref_point = RefPoint::current_w;
    std::optional<Eigen::VectorXd> fixed_reference;
    bool exclude_biases = false;

    static ObjectiveSpec none();
    static ObjectiveSpec task_loss(BatchXd batch);
    static ObjectiveSpec task_loss(std::shared_ptr<const BatchXd> batch);
    static ObjectiveSpec sparsify(double p, RefPoint ref = RefPoint::current_w,
                                  std::optional<Eigen::VectorXd> fixed_reference = std::nullopt,
                                  bool exclude_biases = false);

    /// Throws config_error unless exactly the fields of `kind` are populated.
    void validate() const;
};

struct ObjectiveValue {
    double loss = 0.0;
    std::optional<Eigen::VectorXd> grad;
};

ObjectiveValue objective_grad(const ObjectiveSpec& obj, const NetworkSpec& spec, const Eigen::VectorXd& w);

/// Number of entries zeroed by a p-sparse projection of n entries, floor(p * n).
Index sparse_count(Index n, double p);

/// Zeroes the floor(p * n) smallest-magnitude entries; on equal magnitude the lower
/// flat index is zeroed first.
Eigen::VectorXd p_sparse_projection(const Eigen::VectorXd& w, double p);

/// Same, restricted to entries where `eligible` is true; p applies to the eligible count.
Eigen::VectorXd p_sparse_projection(const Eigen::VectorXd& w, double p, const std::vector<bool>& eligible);

/// Fraction of exactly-zero entries.
double zero_fraction(const Eigen::VectorXd& w);

struct SparsifyResult {
    Eigen::VectorXd w;
    double achieved_sparsity = 0.0;
};

SparsifyResult hard_sparsify(const NetworkSpec& spec, const Eigen::VectorXd& w, double p,
                             bool exclude_biases = false);

} // namespace fip
