#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "icd/decoder.hpp"
#include "icd/instance.hpp"
#include "icd/nn.hpp"
#include "icd/params.hpp"

namespace icd {

inline constexpr double kBceClamp = 1e-7;

// Identification (F_obj) and localization (F_reg) predictors over a shared
// three-layer trunk. Both outputs pass through a sigmoid.
class AuxHeads {
public:
    AuxHeads(std::size_t channels, Rng& rng);

    AuxHeads(const AuxHeads&) = delete;
    AuxHeads& operator=(const AuxHeads&) = delete;

    struct Output {
        Tensor objectness;  // [N]
        Tensor offsets;     // [N×4]
    };
    Output forward(const Tensor& g) const;

    ParamGroup& params() { return group_; }
    const ParamGroup& params() const { return group_; }

private:
    ParamGroup group_;
    Mlp3 trunk_;
    Linear obj_;
    Linear reg_;
};

struct RegressionTarget {
    std::array<double, 4> ltrb{};  // l, t, r, b
    double w = 1.0, h = 1.0;       // normalized box size
};

RegressionTarget regression_targets(const Instance& y, const Center& center);

// Loss value plus the number of instances it was averaged over.
struct MaskedLoss {
    Tensor value = Tensor::scalar(0.0);
    std::size_t count = 0;

    bool empty() const { return count == 0; }
};

// -(1/N) Σ [δ log p + (1-δ) log(1-p)], p clamped to [1e-7, 1-1e-7].
Tensor identification_loss(const Tensor& probs, std::span<const bool> is_real);

// (1/N_r) Σ_real (|Δl|/w + |Δt|/h + |Δr|/w + |Δb|/h); zero when N_r = 0.
MaskedLoss localization_loss(const Tensor& preds, std::span<const RegressionTarget> targets,
                             std::span<const bool> is_real);

struct AuxTaskFlags {
    bool identification = true;
    bool localization = true;
};

struct AuxLoss {
    Tensor idf = Tensor::scalar(0.0);
    Tensor reg = Tensor::scalar(0.0);
    Tensor sum() const { return add(idf, reg); }
};

// One query condition: the instance and the center that was encoded for it.
struct Condition {
    Instance instance;
    Center center;
};

// δ for each condition in a contiguous buffer (usable as span<const bool>).
std::unique_ptr<bool[]> real_flags(std::span<const Condition> conditions);

AuxLoss aux_loss(const Tensor& g, std::span<const Condition> conditions, const AuxHeads& heads,
                 const AuxTaskFlags& flags = {});

struct DistillOptions {
    bool detach_masks = true;
    bool detach_teacher_values = true;
};

/// Attention-weighted value mimicking:
/// 1/(M·N_r) Σ_j Σ_i δ_i ⟨m_ij, mse_rows(LN(V^S_j), LN(V^T_j))⟩
/// where mse_rows averages squared differences over the d channels.
MaskedLoss distill_loss(const Knowledge& teacher, const std::vector<Tensor>& student_values,
                        std::span<const bool> is_real, const DistillOptions& opts = {});

struct LossBundle {
    Tensor det = Tensor::scalar(0.0);
    Tensor aux_idf = Tensor::scalar(0.0);
    Tensor aux_reg = Tensor::scalar(0.0);
    Tensor distill = Tensor::scalar(0.0);
    Tensor total = Tensor::scalar(0.0);
    double lambda = 8.0;

    Tensor aux() const { return add(aux_idf, aux_reg); }
};

// total = det + (aux_idf + aux_reg) + λ·distill
LossBundle total_loss(const Tensor& det, const AuxLoss& aux, const Tensor& distill, double lambda);

struct RoutingCell {
    std::string loss;
    std::string group;
    bool must_be_zero = true;
    double max_abs_grad = 0.0;
    std::string worst_param;

    bool ok() const { return !must_be_zero || max_abs_grad == 0.0; }
};

struct RoutingReport {
    std::vector<RoutingCell> cells;

    bool passed() const;
    std::string to_string() const;
};

/// Backpropagates det, aux and distill separately and checks that each one
/// leaves the forbidden groups with exactly zero gradient: aux must not touch
/// student/teacher, distill and det must not touch decoder/aux/teacher.
/// Gradients are zeroed before and after.
RoutingReport verify_gradient_routing(const LossBundle& bundle,
                                      std::span<ParamGroup* const> groups);

}  // namespace icd
