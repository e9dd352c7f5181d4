#include "fip/plotdata.hpp"

#include <Eigen/Eigenvalues>

#include <fstream>
#include <iomanip>

namespace fip {

Pca pca_project(const std::vector<Eigen::VectorXd>& points, Index components)
{
    if (points.empty())
        throw Error(Errc::invalid_argument, "PCA needs at least one point");
    const auto k = static_cast<Index>(points.size());
    const Index n = points.front().size();
    Eigen::MatrixXd x(k, n);
    for (Index i = 0; i < k; ++i) {
        if (points[static_cast<std::size_t>(i)].size() != n)
            throw Error(Errc::dimension_mismatch, "trajectory points differ in length");
        x.row(i) = points[static_cast<std::size_t>(i)].transpose();
    }
    Pca pca;
    pca.mean = x.colwise().mean().transpose();
    x.rowwise() -= pca.mean.transpose();

    // Eigen-decompose the small k x k Gram matrix instead of the n x n covariance.
    const Eigen::MatrixXd gram = x * x.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    const Index used = std::min(components, k);
    pca.components = Eigen::MatrixXd::Zero(n, components);
    pca.coordinates = Eigen::MatrixXd::Zero(k, components);
    pca.explained = Eigen::VectorXd::Zero(components);
    for (Index c = 0; c < used; ++c) {
        const Index col = k - 1 - c; // ascending order from the solver
        const double lambda = solver.eigenvalues()(col);
        if (!(lambda > 0.0))
            continue;
        const double sigma = std::sqrt(lambda);
        const Eigen::VectorXd u = solver.eigenvectors().col(col);
        pca.components.col(c) = x.transpose() * u / sigma;
        pca.coordinates.col(c) = u * sigma;
        pca.explained(c) = lambda / static_cast<double>(k);
    }
    return pca;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& file, const std::vector<std::string>& columns)
{
    std::ofstream out(file, std::ios::trunc);
    if (!out)
        throw Error(Errc::io_error, "cannot write " + file.string());
    out << std::setprecision(17);
    for (std::size_t i = 0; i < columns.size(); ++i)
        out << (i ? "," : "") << columns[i];
    out << '\n';
    return out;
}

} // namespace

std::vector<std::filesystem::path> emit_plotdata(const RunLog& log, const std::string& kind,
                                                 const std::filesystem::path& out_dir,
                                                 const std::vector<Trajectory>& trajectories)
{
    if (log.empty())
        throw Error(Errc::invalid_argument, "run log is empty");
    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;

    if (kind == "continual") {
        const auto file = out_dir / "accuracy_vs_step.csv";
        auto out = open_csv(file, accuracy_vs_step_columns);
        for (const auto& r : log.records()) {
            const auto phase = r.value("phase", std::string());
            if ((phase != "fip" && phase != "naive") || !r.contains("task_accuracy"))
                continue;
            for (const auto& [task, acc] : r["task_accuracy"].items())
                out << phase << ',' << r.value("phase_index", 0) << ',' << r.value("step", 0) << ',' << task << ','
                    << acc.get<double>() << '\n';
        }
        written.push_back(file);
    } else if (kind == "sparsify") {
        const auto file = out_dir / "accuracy_vs_sparsity.csv";
        auto out = open_csv(file, accuracy_vs_sparsity_columns);
        for (const auto& r : log.phase("sparsify_point"))
            out << r["target_sparsity"].get<double>() << ',' << r["achieved_sparsity"].get<double>() << ','
                << r["train_accuracy"].get<double>() << ',' << r["test_accuracy"].get<double>() << '\n';
        written.push_back(file);
    } else if (kind == "ensemble") {
        const auto file = out_dir / "adversarial_accuracy.csv";
        auto out = open_csv(file, adversarial_columns);
        for (const auto& r : log.phase("model"))
            out << r["model"].get<std::string>() << ',' << r["clean_accuracy"].get<double>() << ','
                << r["adversarial_accuracy"].get<double>() << '\n';
        written.push_back(file);
    } else if (kind == "compose") {
        const auto file = out_dir / "compose.csv";
        auto out = open_csv(file, compose_columns);
        for (const auto& r : log.phase("compose_endpoint"))
            for (const auto& [task, acc] : r["task_accuracy"].items())
                out << r["order"].get<std::string>() << ',' << task << ',' << acc.get<double>() << ','
                    << r["sparsity"].get<double>() << '\n';
        written.push_back(file);
    } else if (kind != "spectrum") {
        throw Error(Errc::invalid_argument, "unknown plot kind '" + kind + "'");
    }

    if (!trajectories.empty()) {
        std::vector<Eigen::VectorXd> all;
        for (const auto& t : trajectories)
            all.insert(all.end(), t.points.begin(), t.points.end());
        const Pca pca = pca_project(all, 2);
        const auto file = out_dir / "trajectory_pca.csv";
        auto out = open_csv(file, trajectory_columns);
        Index row = 0;
        for (const auto& t : trajectories)
            for (std::size_t i = 0; i < t.points.size(); ++i, ++row)
                out << t.name << ',' << i << ',' << pca.coordinates(row, 0) << ',' << pca.coordinates(row, 1) << '\n';
        written.push_back(file);
    }
    return written;
}

} // namespace fip
