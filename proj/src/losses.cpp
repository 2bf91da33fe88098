#include "icd/losses.hpp"

#include <cmath>
#include <memory>
#include <sstream>

namespace icd {

AuxHeads::AuxHeads(std::size_t channels, Rng& rng)
    : group_(Group::aux),
      trunk_(group_, "trunk", channels, channels, channels, rng),
      obj_(group_, "obj", channels, 1, rng),
      reg_(group_, "reg", channels, 4, rng) {}

AuxHeads::Output AuxHeads::forward(const Tensor& g) const {
    const Tensor h = relu(trunk_.forward(g));
    return {reshape(sigmoid(obj_.forward(h)), {g.size(0)}), sigmoid(reg_.forward(h))};
}

RegressionTarget regression_targets(const Instance& y, const Center& center) {
    RegressionTarget t;
    t.ltrb = {center.x - y.box.x1(), center.y - y.box.y1(), y.box.x2() - center.x,
              y.box.y2() - center.y};
    t.w = y.box.w;
    t.h = y.box.h;
    return t;
}

Tensor identification_loss(const Tensor& probs, std::span<const bool> is_real) {
    const std::size_t n = probs.numel();
    if (n != is_real.size() || n == 0) {
        throw DimensionError("identification_loss: " + std::to_string(n) + " predictions for " +
                             std::to_string(is_real.size()) + " flags");
    }
    std::vector<double> t(n), nt(n);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = is_real[i] ? 1.0 : 0.0;
        nt[i] = 1.0 - t[i];
    }
    const Tensor p = clamp(reshape(probs, {n}), kBceClamp, 1.0 - kBceClamp);
    const Tensor pos = mul(log(p), Tensor::from({n}, std::move(t)));
    const Tensor neg = mul(log(add_scalar(scale(p, -1.0), 1.0)), Tensor::from({n}, std::move(nt)));
    return scale(sum(add(pos, neg)), -1.0 / static_cast<double>(n));
}

MaskedLoss localization_loss(const Tensor& preds, std::span<const RegressionTarget> targets,
                             std::span<const bool> is_real) {
    const std::size_t n = targets.size();
    if (preds.shape() != Shape{n, 4} || is_real.size() != n) {
        throw DimensionError("localization_loss: predictions " + shape_str(preds.shape()) +
                             " for " + std::to_string(n) + " targets");
    }
    MaskedLoss out;
    std::vector<double> tgt(n * 4), weight(n * 4, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 4; ++k) tgt[i * 4 + k] = targets[i].ltrb[k];
        if (!is_real[i]) continue;
        ++out.count;
        weight[i * 4 + 0] = weight[i * 4 + 2] = 1.0 / targets[i].w;
        weight[i * 4 + 1] = weight[i * 4 + 3] = 1.0 / targets[i].h;
    }
    if (out.count == 0) return out;
    const Tensor diff = abs(sub(preds, Tensor::from({n, 4}, std::move(tgt))));
    out.value = scale(sum(mul(diff, Tensor::from({n, 4}, std::move(weight)))),
                      1.0 / static_cast<double>(out.count));
    return out;
}

std::unique_ptr<bool[]> real_flags(std::span<const Condition> conditions) {
    auto flags = std::make_unique<bool[]>(conditions.size());
    for (std::size_t i = 0; i < conditions.size(); ++i) flags[i] = conditions[i].instance.is_real;
    return flags;
}

AuxLoss aux_loss(const Tensor& g, std::span<const Condition> conditions, const AuxHeads& heads,
                 const AuxTaskFlags& flags) {
    if (g.dim() != 2 || g.size(0) != conditions.size()) {
        throw DimensionError("aux_loss: aggregated features " + shape_str(g.shape()) + " for " +
                             std::to_string(conditions.size()) + " conditions");
    }
    auto real_buf = real_flags(conditions);
    std::vector<RegressionTarget> targets;
    targets.reserve(conditions.size());
    for (std::size_t i = 0; i < conditions.size(); ++i) {
        targets.push_back(regression_targets(conditions[i].instance, conditions[i].center));
    }
    std::span<const bool> is_real(real_buf.get(), conditions.size());

    const auto out = heads.forward(g);
    AuxLoss loss;
    if (flags.identification) loss.idf = identification_loss(out.objectness, is_real);
    if (flags.localization) loss.reg = localization_loss(out.offsets, targets, is_real).value;
    return loss;
}

MaskedLoss distill_loss(const Knowledge& teacher, const std::vector<Tensor>& student_values,
                        std::span<const bool> is_real, const DistillOptions& opts) {
    const std::size_t m = teacher.heads();
    if (student_values.size() != m) throw ConfigError("distill_loss: head count mismatch");
    const std::size_t n = teacher.instances(), len = teacher.length();
    if (is_real.size() != n) throw DimensionError("distill_loss: flag count mismatch");

    MaskedLoss out;
    std::vector<double> delta(n);
    for (std::size_t i = 0; i < n; ++i) {
        delta[i] = is_real[i] ? 1.0 : 0.0;
        out.count += is_real[i] ? 1 : 0;
    }
    if (out.count == 0) return out;
    const Tensor delta_row = Tensor::from({1, n}, std::move(delta));

    Tensor acc;
    for (std::size_t j = 0; j < m; ++j) {
        const Tensor& vs = student_values[j];
        const Tensor vt = opts.detach_teacher_values ? detach(teacher.values[j]) : teacher.values[j];
        if (vs.shape() != vt.shape() || vs.size(0) != len) {
            throw ConfigError("distill_loss: student values " + shape_str(vs.shape()) +
                              " vs teacher values " + shape_str(vt.shape()) + " over L=" +
                              std::to_string(len));
        }
        const Tensor mse = row_mean(square(sub(layernorm_pf(vs), layernorm_pf(vt))));  // [L]
        const Tensor masks = opts.detach_masks ? detach(teacher.masks[j]) : teacher.masks[j];
        const Tensor weight = reshape(matmul(delta_row, masks), {len});
        const Tensor term = sum(mul(weight, mse));
        acc = j == 0 ? term : add(acc, term);
    }
    out.value = scale(acc, 1.0 / static_cast<double>(m * out.count));
    return out;
}

LossBundle total_loss(const Tensor& det, const AuxLoss& aux, const Tensor& distill, double lambda) {
    LossBundle b;
    b.det = det;
    b.aux_idf = aux.idf;
    b.aux_reg = aux.reg;
    b.distill = distill;
    b.lambda = lambda;
    b.total = add(add(det, aux.sum()), scale(distill, lambda));
    return b;
}

bool RoutingReport::passed() const {
    for (const auto& c : cells) {
        if (!c.ok()) return false;
    }
    return !cells.empty();
}

std::string RoutingReport::to_string() const {
    std::ostringstream os;
    for (const auto& c : cells) {
        os << (c.ok() ? "ok   " : "LEAK ") << "loss=" << c.loss << " group=" << c.group
           << (c.must_be_zero ? " [must be zero]" : " [allowed]") << " max|grad|=" << c.max_abs_grad;
        if (!c.worst_param.empty()) os << " (" << c.worst_param << ")";
        os << '\n';
    }
    return os.str();
}

RoutingReport verify_gradient_routing(const LossBundle& bundle, std::span<ParamGroup* const> groups) {
    auto zero_all = [&] {
        for (auto* g : groups) g->zero_grad();
    };
    auto forbidden = [](const std::string& loss, Group g) {
        if (g == Group::teacher) return true;
        if (loss == "aux") return g == Group::student;
        return g == Group::decoder || g == Group::aux;
    };

    RoutingReport report;
    const std::vector<std::pair<std::string, Tensor>> losses{
        {"det", bundle.det}, {"aux", bundle.aux()}, {"distill", bundle.distill}};
    for (const auto& [name, loss] : losses) {
        zero_all();
        loss.backward();
        for (auto* g : groups) {
            RoutingCell cell;
            cell.loss = name;
            cell.group = std::string(g->name());
            cell.must_be_zero = forbidden(name, g->group());
            for (const auto& p : g->params()) {
                for (double v : p.tensor.grad()) {
                    if (std::fabs(v) > cell.max_abs_grad) {
                        cell.max_abs_grad = std::fabs(v);
                        cell.worst_param = p.name;
                    }
                }
            }
            report.cells.push_back(std::move(cell));
        }
    }
    zero_all();
    return report;
}

}  // namespace icd
