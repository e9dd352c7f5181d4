#include "fip/network.hpp"

#include <algorithm>

namespace fip {

std::string_view to_string(Activation act) noexcept
{
    switch (act) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    }
    return "identity";
}

Activation parse_activation(std::string_view name)
{
    if (name == "identity" || name == "linear")
        return Activation::identity;
    if (name == "relu")
        return Activation::relu;
    if (name == "tanh")
        return Activation::tanh;
    throw Error(Errc::invalid_argument, "unknown activation '" + std::string(name) + "'");
}

NetworkSpec::NetworkSpec(std::vector<Index> layer_dims, std::vector<Activation> activations,
                         std::vector<HeadRange> heads, bool use_bias)
    : dims_(std::move(layer_dims)), acts_(std::move(activations)), heads_(std::move(heads)), use_bias_(use_bias)
{
    if (dims_.size() < 2)
        throw Error(Errc::invalid_argument, "network needs at least an input and an output layer");
    for (std::size_t i = 0; i < dims_.size(); ++i)
        if (dims_[i] < 1)
            throw Error(Errc::dimension_mismatch, "layer " + std::to_string(i) + " has non-positive width");
    if (acts_.size() != dims_.size() - 1)
        throw Error(Errc::dimension_mismatch, "expected one activation per weight layer");

    std::sort(heads_.begin(), heads_.end(),
              [](const HeadRange& a, const HeadRange& b) { return a.begin < b.begin; });
    Index expected = heads_.empty() ? dims_.back() : heads_.front().begin;
    if (expected < 0)
        throw Error(Errc::invalid_argument, "head range starts before output 0");
    for (std::size_t i = 0; i < heads_.size(); ++i) {
        const auto& h = heads_[i];
        if (h.begin != expected || h.end <= h.begin)
            throw Error(Errc::invalid_argument, "head ranges must be non-empty, disjoint and contiguous");
        for (std::size_t j = 0; j < i; ++j)
            if (heads_[j].task_id == h.task_id)
                throw Error(Errc::duplicate_task, "task " + std::to_string(h.task_id) + " has two heads");
        expected = h.end;
    }
    if (expected != dims_.back())
        throw Error(Errc::invalid_argument, "head ranges must end at the last output");

    offsets_.reserve(acts_.size());
    Index offset = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        offsets_.push_back(offset);
        offset += (dims_[l] + (use_bias_ ? 1 : 0)) * dims_[l + 1];
    }
    n_params_ = offset;
}

NetworkSpec NetworkSpec::mlp(Index input_dim, const std::vector<Index>& hidden, Index output_dim,
                             Activation hidden_activation, int task_id)
{
    std::vector<Index> dims;
    dims.push_back(input_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(output_dim);
    std::vector<Activation> acts(hidden.size(), hidden_activation);
    acts.push_back(Activation::identity);
    return NetworkSpec(std::move(dims), std::move(acts), {{task_id, 0, output_dim}});
}

Index NetworkSpec::bias_offset(Index layer) const
{
    if (!use_bias_)
        throw Error(Errc::invalid_argument, "network has no biases");
    return weight_offset(layer) + fan_in(layer) * fan_out(layer);
}

bool NetworkSpec::has_task(int task_id) const noexcept
{
    return std::any_of(heads_.begin(), heads_.end(), [&](const HeadRange& h) { return h.task_id == task_id; });
}

const HeadRange& NetworkSpec::head(int task_id) const
{
    for (const auto& h : heads_)
        if (h.task_id == task_id)
            return h;
    throw Error(Errc::unknown_task, "no head registered for task " + std::to_string(task_id));
}

std::vector<bool> NetworkSpec::bias_mask() const
{
    std::vector<bool> mask(static_cast<std::size_t>(n_params_), false);
    if (!use_bias_)
        return mask;
    for (Index l = 0; l < num_layers(); ++l)
        for (Index j = 0; j < fan_out(l); ++j)
            mask[static_cast<std::size_t>(bias_offset(l) + j)] = true;
    return mask;
}

std::uint64_t NetworkSpec::hash() const noexcept
{
    // FNV-1a over the architecture description.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::int64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= static_cast<std::uint64_t>(v >> (8 * i)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    };
    for (Index d : dims_)
        mix(d);
    for (Activation a : acts_)
        mix(static_cast<std::int64_t>(a));
    for (const auto& hr : heads_) {
        mix(hr.task_id);
        mix(hr.begin);
        mix(hr.end);
    }
    mix(use_bias_ ? 1 : 0);
    return h;
}

} // namespace fip
