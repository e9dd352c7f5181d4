#pragma once

// Dense feedforward network over a flat parameter vector.
//
// Parameter layout: for each weight layer l (dims[l] -> dims[l+1]) the weight
// matrix is stored row-major (one row per output unit), followed by the bias
// vector when biases are enabled. All batched routines treat inputs as an N x k
// matrix with one sample per row.

#include "fip/error.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>
#include <type_traits>

namespace fip {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { identity, relu, tanh };

std::string_view to_string(Activation act) noexcept;
Activation parse_activation(std::string_view name);

/// Output interval [begin, end) owned by one task.
struct HeadRange {
    int task_id = 0;
    Index begin = 0;
    Index end = 0;

    Index size() const noexcept { return end - begin; }
    friend bool operator==(const HeadRange&, const HeadRange&) = default;
};

class NetworkSpec {
public:
    NetworkSpec() = default;
    NetworkSpec(std::vector<Index> layer_dims, std::vector<Activation> activations,
                std::vector<HeadRange> heads, bool use_bias = true);

    /// Hidden layers share one activation, the output layer is linear and a single
    /// head covering every output is registered for `task_id`.
    static NetworkSpec mlp(Index input_dim, const std::vector<Index>& hidden, Index output_dim,
                           Activation hidden_activation, int task_id = 0);

    const std::vector<Index>& layer_dims() const noexcept { return dims_; }
    const std::vector<Activation>& activations() const noexcept { return acts_; }
    const std::vector<HeadRange>& heads() const noexcept { return heads_; }
    bool use_bias() const noexcept { return use_bias_; }

    Index num_layers() const noexcept { return static_cast<Index>(acts_.size()); }
    Index input_dim() const noexcept { return dims_.front(); }
    Index output_dim() const noexcept { return dims_.back(); }
    Index parameter_count() const noexcept { return n_params_; }

    Index weight_offset(Index layer) const { return offsets_[static_cast<std::size_t>(layer)]; }
    Index bias_offset(Index layer) const;
    Index fan_in(Index layer) const { return dims_[static_cast<std::size_t>(layer)]; }
    Index fan_out(Index layer) const { return dims_[static_cast<std::size_t>(layer) + 1]; }

    bool has_task(int task_id) const noexcept;
    const HeadRange& head(int task_id) const;

    /// True for entries of the flat vector that hold biases.
    std::vector<bool> bias_mask() const;

    std::uint64_t hash() const noexcept;

    friend bool operator==(const NetworkSpec& a, const NetworkSpec& b)
    {
        return a.dims_ == b.dims_ && a.acts_ == b.acts_ && a.heads_ == b.heads_ &&
               a.use_bias_ == b.use_bias_;
    }

private:
    std::vector<Index> dims_;
    std::vector<Activation> acts_;
    std::vector<HeadRange> heads_;
    std::vector<Index> offsets_;
    Index n_params_ = 0;
    bool use_bias_ = true;
};

/// Inputs are N x k, one sample per row. Labels are class indices relative to the
/// head of `task_id` (0 .. head.size()-1).
template <typename Scalar>
struct Batch {
    MatrixX<Scalar> inputs;
    std::optional<std::vector<int>> labels;
    int task_id = 0;

    Index size() const noexcept { return inputs.rows(); }
    bool has_labels() const noexcept { return labels.has_value(); }
};

using BatchXd = Batch<double>;

enum class Loss { cross_entropy, mean_squared_error };

template <typename Scalar>
struct LossGrad {
    Scalar loss;
    VectorX<Scalar> grad;
};

/// Cached pre- and post-activations of one batch. post[0] is the input matrix.
template <typename Scalar>
struct ForwardPass {
    std::vector<MatrixX<Scalar>> pre;
    std::vector<MatrixX<Scalar>> post;

    const MatrixX<Scalar>& outputs() const { return post.back(); }
};

// --------------------------------------------------------------------------
// Validation
// --------------------------------------------------------------------------

template <typename Scalar>
void check_weights(const NetworkSpec& spec, const VectorX<Scalar>& w)
{
    if (w.size() != spec.parameter_count())
        throw Error(Errc::dimension_mismatch,
                    "weight vector has " + std::to_string(w.size()) + " entries, network expects " +
                        std::to_string(spec.parameter_count()));
    if (!w.allFinite())
        throw Error(Errc::non_finite, "weight vector contains non-finite entries");
}

template <typename Scalar>
void check_batch(const NetworkSpec& spec, const Batch<Scalar>& batch, bool require_labels)
{
    if (batch.size() < 1)
        throw Error(Errc::empty_batch, "batch is empty");
    if (batch.inputs.cols() != spec.input_dim())
        throw Error(Errc::dimension_mismatch,
                    "layer 0 expects " + std::to_string(spec.input_dim()) + " inputs, batch rows have " +
                        std::to_string(batch.inputs.cols()));
    if (!batch.labels) {
        if (require_labels)
            throw Error(Errc::missing_labels, "batch has no labels");
        return;
    }
    if (static_cast<Index>(batch.labels->size()) != batch.size())
        throw Error(Errc::count_mismatch, "label count differs from input row count");
    const HeadRange& head = spec.head(batch.task_id);
    for (int label : *batch.labels)
        if (label < 0 || label >= head.size())
            throw Error(Errc::label_out_of_range,
                        "label " + std::to_string(label) + " outside head of task " +
                            std::to_string(batch.task_id) + " (size " + std::to_string(head.size()) + ")");
}

// --------------------------------------------------------------------------
// Layer access
// --------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
auto layer_weights(const NetworkSpec& spec, const VectorX<Scalar>& w, Index l)
{
    return Eigen::Map<const RowMatrixX<Scalar>>(w.data() + spec.weight_offset(l), spec.fan_out(l),
                                                spec.fan_in(l));
}

template <typename Scalar>
auto layer_bias(const NetworkSpec& spec, const VectorX<Scalar>& w, Index l)
{
    return Eigen::Map<const VectorX<Scalar>>(w.data() + spec.bias_offset(l), spec.fan_out(l));
}

template <typename Scalar>
MatrixX<Scalar> activate(Activation act, const MatrixX<Scalar>& z)
{
    switch (act) {
    case Activation::relu: return z.cwiseMax(Scalar(0));
    case Activation::tanh: return z.array().tanh().matrix();
    case Activation::identity: break;
    }
    return z;
}

/// Elementwise derivative of the activation; relu'(0) is taken as 0.
template <typename Scalar>
MatrixX<Scalar> activation_derivative(Activation act, const MatrixX<Scalar>& z, const MatrixX<Scalar>& a)
{
    switch (act) {
    case Activation::relu: return (z.array() > Scalar(0)).template cast<Scalar>().matrix();
    case Activation::tanh: return (Scalar(1) - a.array().square()).matrix();
    case Activation::identity: break;
    }
    return MatrixX<Scalar>::Ones(z.rows(), z.cols());
}

// Each output unit is computed as an independent matrix-vector product so the
// result for a unit does not depend on how many other units the layer has.
template <typename Scalar, typename WeightMap>
MatrixX<Scalar> affine(const MatrixX<Scalar>& a, const WeightMap& weights, const Scalar* bias)
{
    MatrixX<Scalar> z(a.rows(), weights.rows());
    for (Index j = 0; j < weights.rows(); ++j) {
        z.col(j).noalias() = a * weights.row(j).transpose();
        if (bias)
            z.col(j).array() += bias[j];
    }
    return z;
}

} // namespace detail

// --------------------------------------------------------------------------
// Evaluation
// --------------------------------------------------------------------------

template <typename Scalar>
ForwardPass<Scalar> forward_pass(const NetworkSpec& spec, const VectorX<Scalar>& w, const MatrixX<Scalar>& inputs)
{
    check_weights(spec, w);
    if (inputs.cols() != spec.input_dim())
        throw Error(Errc::dimension_mismatch,
                    "layer 0 expects " + std::to_string(spec.input_dim()) + " inputs, got " +
                        std::to_string(inputs.cols()));
    ForwardPass<Scalar> pass;
    pass.post.reserve(static_cast<std::size_t>(spec.num_layers()) + 1);
    pass.pre.reserve(static_cast<std::size_t>(spec.num_layers()));
    pass.post.push_back(inputs);
    for (Index l = 0; l < spec.num_layers(); ++l) {
        const auto weights = detail::layer_weights(spec, w, l);
        const Scalar* bias = spec.use_bias() ? w.data() + spec.bias_offset(l) : nullptr;
        MatrixX<Scalar> z = detail::affine<Scalar>(pass.post.back(), weights, bias);
        pass.post.push_back(detail::activate(spec.activations()[static_cast<std::size_t>(l)], z));
        pass.pre.push_back(std::move(z));
    }
    return pass;
}

template <typename Scalar>
MatrixX<Scalar> forward_batch(const NetworkSpec& spec, const VectorX<Scalar>& w, const MatrixX<Scalar>& inputs)
{
    return forward_pass(spec, w, inputs).outputs();
}

/// Raw (pre-softmax) outputs of the last layer for one input.
template <typename Scalar>
VectorX<Scalar> forward(const NetworkSpec& spec, const VectorX<Scalar>& w, const std::type_identity_t<VectorX<Scalar>>& x)
{
    const MatrixX<Scalar> row = x.transpose();
    return forward_batch(spec, w, row).row(0).transpose();
}

/// J(x_i) * dw for every row of the pass, returned as N x m.
template <typename Scalar>
MatrixX<Scalar> jvp_batch(const NetworkSpec& spec, const VectorX<Scalar>& w, const ForwardPass<Scalar>& pass,
                          const VectorX<Scalar>& dw)
{
    if (dw.size() != spec.parameter_count())
        throw Error(Errc::dimension_mismatch, "tangent length differs from parameter count");
    MatrixX<Scalar> da;
    for (Index l = 0; l < spec.num_layers(); ++l) {
        const auto& a = pass.post[static_cast<std::size_t>(l)];
        const auto tangent = detail::layer_weights(spec, dw, l);
        MatrixX<Scalar> dz = a * tangent.transpose();
        if (l > 0)
            dz.noalias() += da * detail::layer_weights(spec, w, l).transpose();
        if (spec.use_bias())
            dz.rowwise() += detail::layer_bias(spec, dw, l).transpose();
        const auto act = spec.activations()[static_cast<std::size_t>(l)];
        if (act == Activation::identity)
            da = std::move(dz);
        else
            da = dz.cwiseProduct(detail::activation_derivative(act, pass.pre[static_cast<std::size_t>(l)],
                                                               pass.post[static_cast<std::size_t>(l) + 1]));
    }
    return da;
}

/// Sum over rows of J(x_i)^T v_i for an N x m cotangent. When `input_grad` is given
/// it receives the per-row input cotangents (N x k).
template <typename Scalar>
VectorX<Scalar> vjp_batch(const NetworkSpec& spec, const VectorX<Scalar>& w, const ForwardPass<Scalar>& pass,
                          const MatrixX<Scalar>& cotangent, MatrixX<Scalar>* input_grad = nullptr)
{
    const Index rows = pass.post.front().rows();
    if (cotangent.rows() != rows || cotangent.cols() != spec.output_dim())
        throw Error(Errc::dimension_mismatch, "cotangent shape differs from N x output_dim");
    VectorX<Scalar> grad(spec.parameter_count());
    const Index last = spec.num_layers() - 1;
    auto scale_by_derivative = [&](Index l, const MatrixX<Scalar>& m) -> MatrixX<Scalar> {
        const auto act = spec.activations()[static_cast<std::size_t>(l)];
        if (act == Activation::identity)
            return m;
        return m.cwiseProduct(detail::activation_derivative(act, pass.pre[static_cast<std::size_t>(l)],
                                                            pass.post[static_cast<std::size_t>(l) + 1]));
    };
    MatrixX<Scalar> delta = scale_by_derivative(last, cotangent);
    for (Index l = last; l >= 0; --l) {
        Eigen::Map<RowMatrixX<Scalar>> gw(grad.data() + spec.weight_offset(l), spec.fan_out(l), spec.fan_in(l));
        gw.noalias() = delta.transpose() * pass.post[static_cast<std::size_t>(l)];
        if (spec.use_bias())
            grad.segment(spec.bias_offset(l), spec.fan_out(l)) = delta.colwise().sum().transpose();
        if (l > 0 || input_grad) {
            MatrixX<Scalar> back = delta * detail::layer_weights(spec, w, l);
            if (l > 0)
                delta = scale_by_derivative(l - 1, back);
            else
                *input_grad = std::move(back);
        }
    }
    return grad;
}

template <typename Scalar>
VectorX<Scalar> jvp(const NetworkSpec& spec, const VectorX<Scalar>& w, const VectorX<Scalar>& x,
                    const VectorX<Scalar>& dw)
{
    const MatrixX<Scalar> row = x.transpose();
    return jvp_batch(spec, w, forward_pass(spec, w, row), dw).row(0).transpose();
}

template <typename Scalar>
VectorX<Scalar> vjp(const NetworkSpec& spec, const VectorX<Scalar>& w, const VectorX<Scalar>& x,
                    const VectorX<Scalar>& v)
{
    if (v.size() != spec.output_dim())
        throw Error(Errc::dimension_mismatch, "cotangent length differs from output dimension");
    const MatrixX<Scalar> row = x.transpose();
    const MatrixX<Scalar> cot = v.transpose();
    return vjp_batch(spec, w, forward_pass(spec, w, row), cot);
}

inline constexpr Index default_jacobian_cap = 10'000'000;

/// Dense m x n Jacobian of the raw outputs with respect to the weights.
template <typename Scalar>
MatrixX<Scalar> output_jacobian(const NetworkSpec& spec, const VectorX<Scalar>& w, const VectorX<Scalar>& x,
                                Index cap = default_jacobian_cap)
{
    const Index m = spec.output_dim();
    const Index n = spec.parameter_count();
    if (m * n > cap)
        throw Error(Errc::cap_exceeded, "Jacobian has " + std::to_string(m * n) + " entries (cap " +
                                            std::to_string(cap) + "); use jvp/vjp instead");
    const MatrixX<Scalar> row = x.transpose();
    const auto pass = forward_pass(spec, w, row);
    MatrixX<Scalar> jac(m, n);
    MatrixX<Scalar> unit = MatrixX<Scalar>::Zero(1, m);
    for (Index i = 0; i < m; ++i) {
        unit(0, i) = Scalar(1);
        jac.row(i) = vjp_batch(spec, w, pass, unit).transpose();
        unit(0, i) = Scalar(0);
    }
    return jac;
}

// --------------------------------------------------------------------------
// Losses
// --------------------------------------------------------------------------

/// Softmax over the head columns of a row of raw outputs.
template <typename Derived>
VectorX<typename Derived::Scalar> head_softmax(const Eigen::MatrixBase<Derived>& logits)
{
    using Scalar = typename Derived::Scalar;
    const Scalar shift = logits.maxCoeff();
    VectorX<Scalar> e = (logits.array() - shift).exp().matrix();
    return e / e.sum();
}

/// Loss value and d(loss)/d(outputs) (N x m) for a labeled batch; the loss is a
/// mean over rows and only the head of `batch.task_id` contributes.
template <typename Scalar>
std::pair<Scalar, MatrixX<Scalar>> output_loss(const NetworkSpec& spec, const MatrixX<Scalar>& outputs,
                                               const Batch<Scalar>& batch, Loss loss)
{
    const HeadRange& head = spec.head(batch.task_id);
    const Index rows = outputs.rows();
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(rows);
    MatrixX<Scalar> dout = MatrixX<Scalar>::Zero(rows, outputs.cols());
    Scalar total(0);
    for (Index i = 0; i < rows; ++i) {
        const int label = (*batch.labels)[static_cast<std::size_t>(i)];
        const auto logits = outputs.row(i).segment(head.begin, head.size()).transpose();
        if (loss == Loss::cross_entropy) {
            const Scalar shift = logits.maxCoeff();
            const Scalar lse = shift + std::log((logits.array() - shift).exp().sum());
            total += lse - logits(label);
            VectorX<Scalar> g = head_softmax(logits);
            g(label) -= Scalar(1);
            dout.row(i).segment(head.begin, head.size()) = inv_n * g.transpose();
        } else {
            VectorX<Scalar> diff = logits;
            diff(label) -= Scalar(1);
            total += diff.squaredNorm();
            dout.row(i).segment(head.begin, head.size()) = Scalar(2) * inv_n * diff.transpose();
        }
    }
    return {total * inv_n, std::move(dout)};
}

template <typename Scalar>
LossGrad<Scalar> loss_and_grad(const NetworkSpec& spec, const VectorX<Scalar>& w, const Batch<Scalar>& batch,
                               Loss loss = Loss::cross_entropy)
{
    check_batch(spec, batch, true);
    const auto pass = forward_pass(spec, w, batch.inputs);
    auto [value, dout] = output_loss(spec, pass.outputs(), batch, loss);
    return {value, vjp_batch(spec, w, pass, dout)};
}

/// Per-row gradient of the (unaveraged) cross-entropy with respect to the inputs.
template <typename Scalar>
MatrixX<Scalar> loss_input_gradients(const NetworkSpec& spec, const VectorX<Scalar>& w, const Batch<Scalar>& batch)
{
    check_batch(spec, batch, true);
    const auto pass = forward_pass(spec, w, batch.inputs);
    auto dout = output_loss(spec, pass.outputs(), batch, Loss::cross_entropy).second;
    dout *= static_cast<Scalar>(batch.size());
    MatrixX<Scalar> grads;
    vjp_batch(spec, w, pass, dout, &grads);
    return grads;
}

// --------------------------------------------------------------------------
// Prediction
// --------------------------------------------------------------------------

/// Argmax over the head of `task_id`, lowest index on ties. Class is head-relative.
template <typename Scalar>
std::vector<int> predict(const NetworkSpec& spec, const VectorX<Scalar>& w, const MatrixX<Scalar>& inputs,
                         int task_id)
{
    const HeadRange& head = spec.head(task_id);
    const MatrixX<Scalar> out = forward_batch(spec, w, inputs);
    std::vector<int> classes(static_cast<std::size_t>(out.rows()));
    for (Index i = 0; i < out.rows(); ++i) {
        Index best = 0;
        out.row(i).segment(head.begin, head.size()).maxCoeff(&best);
        classes[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return classes;
}

/// Fraction of correctly classified rows in [0, 1].
template <typename Scalar>
double accuracy(const NetworkSpec& spec, const VectorX<Scalar>& w, const Batch<Scalar>& batch)
{
    check_batch(spec, batch, true);
    const auto classes = predict(spec, w, batch.inputs, batch.task_id);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < classes.size(); ++i)
        correct += classes[i] == (*batch.labels)[i];
    return static_cast<double>(correct) / static_cast<double>(classes.size());
}

// --------------------------------------------------------------------------
// Surgery
// --------------------------------------------------------------------------

/// Adds `count` output units for a new task. Existing rows of the output layer are
/// copied verbatim; new weights are drawn from U(-init_scale, init_scale) and new
/// biases start at zero.
template <typename Scalar>
std::pair<NetworkSpec, VectorX<Scalar>> append_output_nodes(const NetworkSpec& spec, const VectorX<Scalar>& w,
                                                            int new_task_id, Index count, Scalar init_scale,
                                                            std::uint64_t seed)
{
    check_weights(spec, w);
    if (count < 1)
        throw Error(Errc::invalid_argument, "append_output_nodes needs count >= 1");
    if (spec.has_task(new_task_id))
        throw Error(Errc::duplicate_task, "task " + std::to_string(new_task_id) + " already has a head");
    if (!(init_scale >= Scalar(0)))
        throw Error(Errc::invalid_argument, "init_scale must be non-negative");

    std::vector<Index> dims = spec.layer_dims();
    const Index old_m = dims.back();
    dims.back() += count;
    std::vector<HeadRange> heads = spec.heads();
    heads.push_back({new_task_id, old_m, old_m + count});
    NetworkSpec grown(dims, spec.activations(), heads, spec.use_bias());

    VectorX<Scalar> out(grown.parameter_count());
    const Index last = spec.num_layers() - 1;
    const Index body = spec.weight_offset(last);
    out.head(body) = w.head(body);

    const Index hidden = spec.fan_in(last);
    Eigen::Map<RowMatrixX<Scalar>> new_weights(out.data() + grown.weight_offset(last), old_m + count, hidden);
    new_weights.topRows(old_m) = detail::layer_weights(spec, w, last);
    if (init_scale > Scalar(0)) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> dist(-static_cast<double>(init_scale), static_cast<double>(init_scale));
        for (Index r = old_m; r < old_m + count; ++r)
            for (Index c = 0; c < hidden; ++c)
                new_weights(r, c) = static_cast<Scalar>(dist(rng));
    } else {
        new_weights.bottomRows(count).setZero();
    }
    if (spec.use_bias()) {
        auto bias = out.segment(grown.bias_offset(last), old_m + count);
        bias.head(old_m) = detail::layer_bias(spec, w, last);
        bias.tail(count).setZero();
    }
    return {std::move(grown), std::move(out)};
}

} // namespace fip
