#pragma once

#include <functional>
#include <string>
#include <vector>

#include "icd/params.hpp"

namespace icd {

struct GradCheckOptions {
    double step = 1e-5;
    double tol = 1e-4;
    // Denominator floor of the relative error |a-n| / max(|a|, |n|, floor).
    // Below the floor the check is effectively absolute.
    double rel_floor = 1e-4;
    // Coordinates checked per tensor; 0 checks all of them. Larger tensors
    // get an evenly strided subset.
    std::size_t max_coords = 0;
};

struct GradCheckEntry {
    std::string name;
    std::size_t coords_checked = 0;
    double max_rel_error = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::string label;
    std::vector<GradCheckEntry> entries;
    bool aborted = false;
    std::string diagnostic;

    bool passed() const;
    double max_error() const;
};

/// Compares autodiff gradients of the scalar `f` against central differences
/// for every tensor in `params`. `f` must rebuild its graph on each call and
/// be deterministic; a mismatch between two evaluations aborts the check.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& opts = {});

GradCheckReport finite_diff_check(const std::function<Tensor()>& f, const ParamGroup& group,
                                  const GradCheckOptions& opts = {});

}  // namespace icd
