#pragma once

// CSV series derived from run logs, and 2-D PCA projections of weight
// trajectories. Column schemas are fixed; see README.

#include "fip/io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fip {

/// Top principal directions of a point set (rows = points).
struct Pca {
    Eigen::VectorXd mean;
    Eigen::MatrixXd components;  ///< n x k, orthonormal columns
    Eigen::MatrixXd coordinates; ///< points x k
    Eigen::VectorXd explained;   ///< variance along each component
};

Pca pca_project(const std::vector<Eigen::VectorXd>& points, Index components = 2);

struct Trajectory {
    std::string name;
    std::vector<Eigen::VectorXd> points;
};

inline const std::vector<std::string> accuracy_vs_step_columns = {"method", "phase_index", "step", "task_id",
                                                                  "test_accuracy"};
inline const std::vector<std::string> accuracy_vs_sparsity_columns = {"target_sparsity", "achieved_sparsity",
                                                                      "train_accuracy", "test_accuracy"};
inline const std::vector<std::string> adversarial_columns = {"model", "clean_accuracy", "adversarial_accuracy"};
inline const std::vector<std::string> compose_columns = {"order", "task_id", "test_accuracy", "sparsity"};
inline const std::vector<std::string> trajectory_columns = {"trajectory", "index", "pc1", "pc2"};

/// Writes the CSV series for an experiment kind (continual | sparsify | ensemble |
/// compose) and, when trajectories are given, trajectory_pca.csv. Returns the files
/// written.
std::vector<std::filesystem::path> emit_plotdata(const RunLog& log, const std::string& kind,
                                                 const std::filesystem::path& out_dir,
                                                 const std::vector<Trajectory>& trajectories = {});

} // namespace fip
