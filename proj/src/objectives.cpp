#include "fip/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fip {

std::string_view to_string(ObjectiveKind kind) noexcept
{
    switch (kind) {
    case ObjectiveKind::null: return "null";
    case ObjectiveKind::task_loss: return "task-loss";
    case ObjectiveKind::sparsify: return "sparsify";
    }
    return "null";
}

std::string_view to_string(RefPoint ref) noexcept
{
    return ref == RefPoint::current_w ? "current-w" : "fixed-w";
}

RefPoint parse_ref_point(std::string_view name)
{
    if (name == "current-w")
        return RefPoint::current_w;
    if (name == "fixed-w" || name == "fixed-w_t")
        return RefPoint::fixed_w;
    throw Error(Errc::config_error, "unknown ref_point '" + std::string(name) + "'");
}

ObjectiveSpec ObjectiveSpec::none()
{
    return {};
}

ObjectiveSpec ObjectiveSpec::task_loss(BatchXd batch)
{
    return task_loss(std::make_shared<const BatchXd>(std::move(batch)));
}

ObjectiveSpec ObjectiveSpec::task_loss(std::shared_ptr<const BatchXd> batch)
{
    ObjectiveSpec obj;
    obj.kind = ObjectiveKind::task_loss;
    obj.task_batch = std::move(batch);
    return obj;
}

ObjectiveSpec ObjectiveSpec::sparsify(double p, RefPoint ref, std::optional<Eigen::VectorXd> fixed_reference,
                                      bool exclude_biases)
{
    ObjectiveSpec obj;
    obj.kind = ObjectiveKind::sparsify;
    obj.sparsity = p;
    obj.ref_point = ref;
    obj.fixed_reference = std::move(fixed_reference);
    obj.exclude_biases = exclude_biases;
    return obj;
}

void ObjectiveSpec::validate() const
{
    switch (kind) {
    case ObjectiveKind::null:
        if (task_batch || fixed_reference || sparsity != 0.0)
            throw Error(Errc::config_error, "null objective carries task or sparsity fields");
        return;
    case ObjectiveKind::task_loss:
        if (!task_batch)
            throw Error(Errc::config_error, "task-loss objective needs a task batch");
        if (fixed_reference || sparsity != 0.0)
            throw Error(Errc::config_error, "task-loss objective carries sparsity fields");
        return;
    case ObjectiveKind::sparsify:
        if (task_batch)
            throw Error(Errc::config_error, "sparsify objective carries a task batch");
        if (!(sparsity >= 0.0 && sparsity <= 1.0))
            throw Error(Errc::config_error, "sparsity must lie in [0, 1]");
        if ((ref_point == RefPoint::fixed_w) != fixed_reference.has_value())
            throw Error(Errc::config_error, "fixed-w reference point needs exactly one anchor vector");
        return;
    }
}

ObjectiveValue objective_grad(const ObjectiveSpec& obj, const NetworkSpec& spec, const Eigen::VectorXd& w)
{
    obj.validate();
    check_weights(spec, w);
    switch (obj.kind) {
    case ObjectiveKind::null:
        return {};
    case ObjectiveKind::task_loss: {
        auto [loss, grad] = loss_and_grad(spec, w, *obj.task_batch, Loss::cross_entropy);
        return {loss, std::move(grad)};
    }
    case ObjectiveKind::sparsify: {
        const Eigen::VectorXd& ref = obj.ref_point == RefPoint::current_w ? w : *obj.fixed_reference;
        if (ref.size() != w.size())
            throw Error(Errc::dimension_mismatch, "sparsify anchor length differs from weight length");
        const Eigen::VectorXd target = obj.exclude_biases
                                           ? p_sparse_projection(ref, obj.sparsity, [&] {
                                                 auto mask = spec.bias_mask();
                                                 mask.flip();
                                                 return mask;
                                             }())
                                           : p_sparse_projection(ref, obj.sparsity);
        const Eigen::VectorXd diff = w - target;
        return {diff.squaredNorm(), Eigen::VectorXd(2.0 * diff)};
    }
    }
    return {};
}

Index sparse_count(Index n, double p)
{
    if (!(p >= 0.0 && p <= 1.0))
        throw Error(Errc::invalid_argument, "sparsity must lie in [0, 1]");
    // Absorb representation error so that e.g. 0.29 * 100 counts 29.
    const double exact = p * static_cast<double>(n);
    const auto k = static_cast<Index>(std::floor(exact + 1e-9 * std::max(1.0, exact)));
    return std::min(k, n);
}

Eigen::VectorXd p_sparse_projection(const Eigen::VectorXd& w, double p)
{
    return p_sparse_projection(w, p, std::vector<bool>(static_cast<std::size_t>(w.size()), true));
}

Eigen::VectorXd p_sparse_projection(const Eigen::VectorXd& w, double p, const std::vector<bool>& eligible)
{
    if (static_cast<Index>(eligible.size()) != w.size())
        throw Error(Errc::dimension_mismatch, "eligibility mask length differs from weight length");
    std::vector<Index> order;
    order.reserve(eligible.size());
    for (Index i = 0; i < w.size(); ++i)
        if (eligible[static_cast<std::size_t>(i)])
            order.push_back(i);
    const Index k = sparse_count(static_cast<Index>(order.size()), p);
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return std::abs(w(a)) < std::abs(w(b)); });
    Eigen::VectorXd out = w;
    for (Index i = 0; i < k; ++i)
        out(order[static_cast<std::size_t>(i)]) = 0.0;
    return out;
}

double zero_fraction(const Eigen::VectorXd& w)
{
    if (w.size() == 0)
        return 0.0;
    return static_cast<double>((w.array() == 0.0).count()) / static_cast<double>(w.size());
}

SparsifyResult hard_sparsify(const NetworkSpec& spec, const Eigen::VectorXd& w, double p, bool exclude_biases)
{
    check_weights(spec, w);
    Eigen::VectorXd out;
    if (exclude_biases) {
        auto mask = spec.bias_mask();
        mask.flip();
        out = p_sparse_projection(w, p, mask);
    } else {
        out = p_sparse_projection(w, p);
    }
    const double achieved = zero_fraction(out);
    return {std::move(out), achieved};
}

} // namespace fip
