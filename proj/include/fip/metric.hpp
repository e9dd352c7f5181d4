#pragma once

// Weight-space metric g_w(X) = (1/N) sum_i J(x_i)^T J(x_i).
//
// The metric is never formed for path construction: MetricEvaluation caches one
// forward pass over its batch and exposes J and J^T as batched products, scaled
// by 1/sqrt(N) so that the induced quadratic form is a plain squared norm.

#include "fip/network.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace fip {

enum class OutputMode { pre_softmax, post_softmax };

inline constexpr Index default_metric_cap = 2000;
inline constexpr double default_degeneracy_tol = 1e-6;

template <typename Scalar>
class MetricEvaluation {
public:
    /// `tasks` selects the heads whose outputs enter the metric; empty means every
    /// output of the network.
    MetricEvaluation(NetworkSpec spec, VectorX<Scalar> w, Batch<Scalar> batch,
                     OutputMode mode = OutputMode::pre_softmax, std::vector<int> tasks = {})
        : spec_(std::move(spec)), w_(std::move(w)), batch_(std::move(batch)), mode_(mode), tasks_(std::move(tasks))
    {
        check_batch(spec_, batch_, false);
        pass_ = forward_pass(spec_, w_, batch_.inputs);
        scale_ = Scalar(1) / std::sqrt(static_cast<Scalar>(batch_.size()));

        if (tasks_.empty()) {
            if (spec_.heads().empty())
                blocks_.emplace_back(0, spec_.output_dim());
            else
                for (const auto& h : spec_.heads())
                    blocks_.emplace_back(h.begin, h.end);
        } else {
            for (int t : tasks_) {
                const auto& h = spec_.head(t);
                blocks_.emplace_back(h.begin, h.end);
            }
        }
        if (mode_ == OutputMode::post_softmax) {
            probs_ = MatrixX<Scalar>::Zero(batch_.size(), spec_.output_dim());
            for (Index i = 0; i < batch_.size(); ++i)
                for (auto [b, e] : blocks_)
                    probs_.row(i).segment(b, e - b) = head_softmax(pass_.outputs().row(i).segment(b, e - b)).transpose();
        }
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    const VectorX<Scalar>& weights() const noexcept { return w_; }
    const Batch<Scalar>& batch() const noexcept { return batch_; }
    OutputMode output_mode() const noexcept { return mode_; }
    const std::vector<int>& tasks() const noexcept { return tasks_; }
    Index dimension() const noexcept { return spec_.parameter_count(); }
    Index batch_size() const noexcept { return batch_.size(); }

    /// (1/sqrt(N)) P J dw as an N x m matrix, P being the output selection (and
    /// softmax Jacobian in post-softmax mode). Its squared norm is q(dw).
    MatrixX<Scalar> push_forward(const VectorX<Scalar>& dw) const
    {
        MatrixX<Scalar> out = jvp_batch(spec_, w_, pass_, dw);
        project(out);
        out *= scale_;
        return out;
    }

    /// (1/sqrt(N)) J^T P u, the adjoint of push_forward.
    VectorX<Scalar> pull_back(MatrixX<Scalar> u) const
    {
        project(u);
        u *= scale_;
        return vjp_batch(spec_, w_, pass_, u);
    }

    /// q(dw) = (1/N) sum_i ||P J(x_i) dw||^2.
    Scalar output_distance_sq(const VectorX<Scalar>& dw) const { return push_forward(dw).squaredNorm(); }

    /// G dw without forming G.
    VectorX<Scalar> apply(const VectorX<Scalar>& dw) const { return pull_back(push_forward(dw)); }

    /// Dense n x n metric, exactly symmetric.
    MatrixX<Scalar> metric_matrix(Index cap = default_metric_cap) const
    {
        const Index n = dimension();
        if (n > cap)
            throw Error(Errc::cap_exceeded, "metric is " + std::to_string(n) + " x " + std::to_string(n) +
                                                " (cap " + std::to_string(cap) + ")");
        const Index rows = batch_size() * spec_.output_dim();
        MatrixX<Scalar> stacked(rows, n);
        VectorX<Scalar> unit = VectorX<Scalar>::Zero(n);
        for (Index j = 0; j < n; ++j) {
            unit(j) = Scalar(1);
            const MatrixX<Scalar> col = push_forward(unit);
            stacked.col(j) = Eigen::Map<const VectorX<Scalar>>(col.data(), rows);
            unit(j) = Scalar(0);
        }
        MatrixX<Scalar> g = MatrixX<Scalar>::Zero(n, n);
        g.template selfadjointView<Eigen::Lower>().rankUpdate(stacked.transpose());
        g.template triangularView<Eigen::StrictlyUpper>() = g.transpose();
        return g;
    }

private:
    void project(MatrixX<Scalar>& m) const
    {
        MatrixX<Scalar> out = MatrixX<Scalar>::Zero(m.rows(), m.cols());
        for (auto [b, e] : blocks_) {
            const Index width = e - b;
            if (mode_ == OutputMode::pre_softmax) {
                out.middleCols(b, width) = m.middleCols(b, width);
                continue;
            }
            // (diag(s) - s s^T) is symmetric, so the same map serves J and J^T.
            const auto s = probs_.middleCols(b, width);
            const auto v = m.middleCols(b, width);
            const VectorX<Scalar> dot = s.cwiseProduct(v).rowwise().sum();
            out.middleCols(b, width) = s.cwiseProduct(v) - s.cwiseProduct(dot.replicate(1, width));
        }
        m = std::move(out);
    }

    NetworkSpec spec_;
    VectorX<Scalar> w_;
    Batch<Scalar> batch_;
    OutputMode mode_;
    std::vector<int> tasks_;
    std::vector<std::pair<Index, Index>> blocks_;
    ForwardPass<Scalar> pass_;
    MatrixX<Scalar> probs_;
    Scalar scale_ = Scalar(1);
};

/// Eigenvalues of the dense metric in descending order.
struct SpectrumReport {
    Eigen::VectorXd eigenvalues;
    Index degeneracy_dim = 0;
    double tol_rel = default_degeneracy_tol;
    Index n = 0;
    Index batch_size = 0;

    Index rank() const noexcept { return n - degeneracy_dim; }
};

template <typename Scalar>
SpectrumReport metric_spectrum(const MetricEvaluation<Scalar>& me, double tol_rel = default_degeneracy_tol,
                               Index cap = default_metric_cap)
{
    if (!(tol_rel >= 0.0))
        throw Error(Errc::invalid_argument, "tol_rel must be non-negative");
    const MatrixX<double> g = me.metric_matrix(cap).template cast<double>();
    if (!g.allFinite())
        throw Error(Errc::non_finite, "metric has non-finite entries");
    Eigen::SelfAdjointEigenSolver<MatrixX<double>> solver(g, Eigen::EigenvaluesOnly);
    SpectrumReport report;
    report.eigenvalues = solver.eigenvalues().reverse();
    report.tol_rel = tol_rel;
    report.n = g.rows();
    report.batch_size = me.batch_size();
    const double lmax = report.n > 0 ? report.eigenvalues(0) : 0.0;
    if (lmax <= 0.0) {
        report.degeneracy_dim = report.n;
    } else {
        report.degeneracy_dim = (report.eigenvalues.array() < tol_rel * lmax).count();
    }
    return report;
}

/// (1/N) sum_i ||f(x_i, w + h dw) - f(x_i, w)||^2 / h^2 over every raw output.
template <typename Scalar>
Scalar fd_output_distance(const NetworkSpec& spec, const VectorX<Scalar>& w, const Batch<Scalar>& batch,
                          const VectorX<Scalar>& dw, Scalar h)
{
    if (!(h > Scalar(0)))
        throw Error(Errc::invalid_argument, "finite-difference step must be positive");
    check_batch(spec, batch, false);
    if (dw.size() != w.size())
        throw Error(Errc::dimension_mismatch, "perturbation length differs from weight length");
    const VectorX<Scalar> moved = w + h * dw;
    const MatrixX<Scalar> diff = forward_batch(spec, moved, batch.inputs) - forward_batch(spec, w, batch.inputs);
    return diff.squaredNorm() / (h * h * static_cast<Scalar>(batch.size()));
}

} // namespace fip
