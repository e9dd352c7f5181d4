#pragma once

#include "fip/network.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace fip::test {

inline Eigen::VectorXd random_vector(Index n, std::uint64_t seed, double scale = 1.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    Eigen::VectorXd v(n);
    for (Index i = 0; i < n; ++i)
        v(i) = dist(rng);
    return v;
}

inline Eigen::MatrixXd random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0)
{
    const Eigen::VectorXd flat = random_vector(rows * cols, seed, scale);
    return Eigen::Map<const Eigen::MatrixXd>(flat.data(), rows, cols);
}

inline double rel_diff(double a, double b, double floor = 1e-12)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Unlabeled batch of `rows` standard-normal inputs.
inline BatchXd random_batch(const NetworkSpec& spec, Index rows, std::uint64_t seed)
{
    BatchXd b;
    b.inputs = random_matrix(rows, spec.input_dim(), seed);
    b.task_id = spec.heads().empty() ? 0 : spec.heads().front().task_id;
    return b;
}

inline BatchXd labeled_batch(const NetworkSpec& spec, Index rows, std::uint64_t seed)
{
    BatchXd b = random_batch(spec, rows, seed);
    const Index classes = spec.head(b.task_id).size();
    std::mt19937_64 rng(seed + 1);
    std::vector<int> labels(static_cast<std::size_t>(rows));
    for (auto& l : labels)
        l = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
    b.labels = std::move(labels);
    return b;
}

/// One identity layer k -> m with the given weights (row-major) and biases.
inline NetworkSpec linear_spec(Index k, Index m, bool use_bias = true)
{
    return NetworkSpec({k, m}, {Activation::identity}, {{0, 0, m}}, use_bias);
}

/// Central finite-difference gradient of a scalar function of w.
template <typename F>
Eigen::VectorXd fd_gradient(F&& f, const Eigen::VectorXd& w, double h = 1e-5)
{
    Eigen::VectorXd g(w.size());
    Eigen::VectorXd x = w;
    for (Index i = 0; i < w.size(); ++i) {
        x(i) = w(i) + h;
        const double up = f(x);
        x(i) = w(i) - h;
        const double down = f(x);
        x(i) = w(i);
        g(i) = (up - down) / (2.0 * h);
    }
    return g;
}

inline std::filesystem::path fixture(const std::string& name)
{
    return std::filesystem::path(FIP_FIXTURE_DIR) / name;
}

/// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::path(FIP_BINARY_DIR) / "test-scratch" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace fip::test
