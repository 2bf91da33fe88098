#include "icd/params.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace icd {

std::string_view group_name(Group g) {
    switch (g) {
        case Group::teacher: return "teacher";
        case Group::student: return "student";
        case Group::decoder: return "decoder";
        case Group::aux: return "aux";
    }
    return "?";
}

void ParamGroup::add(std::string name, Tensor tensor) {
    if (!tensor.is_leaf()) throw ContractError("parameter '" + name + "' is not a leaf");
    for (const auto& p : params_) {
        if (p.name == name) throw ContractError("duplicate parameter name '" + name + "'");
        if (p.tensor.same(tensor)) {
            throw ContractError("tensor registered twice as '" + p.name + "' and '" + name + "'");
        }
    }
    tensor.set_requires_grad(!frozen_);
    params_.push_back({std::move(name), std::move(tensor)});
}

const Tensor& ParamGroup::get(std::string_view name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.tensor;
    }
    throw ContractError("no parameter '" + std::string(name) + "' in group " +
                        std::string(this->name()));
}

bool ParamGroup::contains(std::string_view name) const {
    return std::any_of(params_.begin(), params_.end(),
                       [&](const NamedTensor& p) { return p.name == name; });
}

std::size_t ParamGroup::numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void ParamGroup::freeze() {
    frozen_ = true;
    for (auto& p : params_) p.tensor.set_requires_grad(false);
}

void ParamGroup::unfreeze() {
    frozen_ = false;
    for (auto& p : params_) p.tensor.set_requires_grad(true);
}

void ParamGroup::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

double ParamGroup::max_abs_grad() const {
    double m = 0.0;
    for (const auto& p : params_) {
        for (double g : p.tensor.grad()) m = std::max(m, std::fabs(g));
    }
    return m;
}

bool groups_disjoint(std::span<const ParamGroup* const> groups) {
    std::unordered_set<const TensorImpl*> seen;
    for (const auto* g : groups) {
        for (const auto& p : g->params()) {
            if (!seen.insert(p.tensor.impl().get()).second) return false;
        }
    }
    return true;
}

}  // namespace icd
