#include "icd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace icd {

bool GradCheckReport::passed() const {
    if (aborted) return false;
    return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
}

double GradCheckReport::max_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params,
                                  const GradCheckOptions& opts) {
    GradCheckReport report;
    for (const auto& p : params) {
        if (!p.tensor.requires_grad()) {
            report.aborted = true;
            report.diagnostic = "parameter '" + p.name + "' does not require grad";
            return report;
        }
        p.tensor.impl()->grad.assign(p.tensor.numel(), 0.0);
    }

    const Tensor loss = f();
    loss.backward();
    const double base = loss.item();
    const double again = f().item();
    if (base != again) {
        report.aborted = true;
        report.diagnostic = "objective is not deterministic: " + std::to_string(base) + " vs " +
                            std::to_string(again);
        return report;
    }

    for (const auto& p : params) {
        GradCheckEntry entry;
        entry.name = p.name;
        auto& data = p.tensor.impl()->data;
        const auto& grad = p.tensor.impl()->grad;
        const std::size_t n = data.size();
        const std::size_t stride =
            (opts.max_coords == 0 || n <= opts.max_coords) ? 1 : (n + opts.max_coords - 1) / opts.max_coords;
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = data[i];
            data[i] = orig + opts.step;
            const double fp = f().item();
            data[i] = orig - opts.step;
            const double fm = f().item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double denom =
                std::max({std::fabs(grad[i]), std::fabs(numeric), opts.rel_floor});
            entry.max_rel_error = std::max(entry.max_rel_error, std::fabs(grad[i] - numeric) / denom);
            ++entry.coords_checked;
        }
        entry.pass = entry.max_rel_error < opts.tol;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& f, const ParamGroup& group,
                                  const GradCheckOptions& opts) {
    auto report = finite_diff_check(f, group.params(), opts);
    report.label = std::string(group.name());
    return report;
}

}  // namespace icd
