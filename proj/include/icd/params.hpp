#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "icd/tensor.hpp"

namespace icd {

enum class Group { teacher, student, decoder, aux };

std::string_view group_name(Group g);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Trainable tensors tagged with the subsystem that owns them. Gradient
// routing is audited per group.
class ParamGroup {
public:
    explicit ParamGroup(Group group) : group_(group) {}

    ParamGroup(const ParamGroup&) = delete;
    ParamGroup& operator=(const ParamGroup&) = delete;
    ParamGroup(ParamGroup&&) = default;
    ParamGroup& operator=(ParamGroup&&) = default;

    Group group() const { return group_; }
    std::string_view name() const { return group_name(group_); }

    // Registers a leaf tensor; it becomes trainable unless the group is frozen.
    // Duplicate names or re-registration of the same tensor throw.
    void add(std::string name, Tensor tensor);

    const std::vector<NamedTensor>& params() const { return params_; }
    const Tensor& get(std::string_view name) const;
    bool contains(std::string_view name) const;
    std::size_t numel() const;

    void freeze();
    void unfreeze();
    bool frozen() const { return frozen_; }

    void zero_grad();

    // Largest |grad| over the group; absent gradients count as zero.
    double max_abs_grad() const;

private:
    Group group_;
    bool frozen_ = false;
    std::vector<NamedTensor> params_;
};

// True iff no tensor is registered in more than one of the given groups.
bool groups_disjoint(std::span<const ParamGroup* const> groups);

}  // namespace icd
