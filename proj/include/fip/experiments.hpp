#pragma once

// Experiment drivers. Each driver returns its RunLog; the last record has phase
// "summary". When output_dir is set the driver takes the directory lock, mirrors
// the log to run_log.jsonl and writes config.json, checkpoints and CSV series.

#include "fip/data.hpp"
#include "fip/ensemble.hpp"
#include "fip/io.hpp"
#include "fip/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fip {

struct DatasetConfig {
    std::string type = "blobs"; ///< blobs | idx
    // blobs
    int n_classes = 2;
    Index n_per_class = 200;
    Index dim = 2;
    double separation = 6.0;
    std::uint64_t seed = 0;
    // idx
    std::filesystem::path images;
    std::filesystem::path labels;
    std::vector<int> classes; ///< empty keeps every class
    // both
    double test_fraction = 0.25;
    bool normalize = false;
};

struct TaskConfig {
    int task_id = 0;
    DatasetConfig data;
};

struct AttackSettings {
    double eps_fraction = 0.03;  ///< of the input range
    double step_fraction = 0.25; ///< of eps_adv
    int n_iters = 10;
    bool random_start = true;
};

struct ExperimentConfig {
    std::string kind = "continual"; ///< continual | sparsify | ensemble | compose | spectrum
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;

    std::vector<Index> hidden = {16};
    Activation activation = Activation::relu;
    std::vector<TaskConfig> tasks;

    TrainConfig train;
    TrainConfig finetune;          ///< naive baseline; epochs unused (the update budget is n_steps)
    double append_init_scale = 0.1;

    PathConfig path;               ///< epsilon <= 0 means relative_step * ||w_start||
    double relative_step = 1e-2;
    std::optional<PathConfig> sparsify_path; ///< defaults to `path`

    std::vector<double> sparsity_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    RefPoint ref_point = RefPoint::current_w;
    bool exclude_biases = false;

    int ensemble_members = 10;
    AttackSettings attack;
    Index diversity_layer = 1;

    double compose_sparsity = 0.3;

    double tol_rel = default_degeneracy_tol;
    Index spectrum_batch = 256;

    void validate() const;
};

/// Relative dataset paths resolve against `base_dir`. Unknown keys are errors.
ExperimentConfig experiment_config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& file);
/// Every field including defaults.
Json to_json(const ExperimentConfig& cfg);

/// Train and test splits of one task, with labels relative to its head.
TrainTest load_task_data(const TaskConfig& task);

/// Path config with epsilon resolved against the starting weights.
PathConfig resolve_path_config(const PathConfig& cfg, double relative_step, const Eigen::VectorXd& w_start);

RunLog run_continual(const ExperimentConfig& cfg);
RunLog run_sparsify(const ExperimentConfig& cfg);
RunLog run_ensemble(const ExperimentConfig& cfg);
RunLog run_compose(const ExperimentConfig& cfg);
RunLog run_spectrum(const ExperimentConfig& cfg);

/// Dispatches on cfg.kind.
RunLog run_experiment(const ExperimentConfig& cfg);

} // namespace fip
