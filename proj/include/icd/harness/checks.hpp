#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "icd/decoder.hpp"
#include "icd/gradcheck.hpp"
#include "icd/harness/config.hpp"
#include "icd/harness/scene.hpp"
#include "icd/losses.hpp"
#include "icd/pyramid.hpp"

namespace icd {

// Small end-to-end setup (32x32 image, D=8, M=2) used by the gradient and
// routing audits. Everything is a deterministic function of the seed.
struct CheckFixture {
    ExperimentConfig cfg;
    Scene scene;
    DatasetStats stats;
    std::unique_ptr<ToyDetector> teacher;
    std::unique_ptr<ToyDetector> student;
    std::unique_ptr<InstanceDecoder> decoder;
    std::unique_ptr<AuxHeads> aux;
    FlatPyramid teacher_flat;
    std::vector<Condition> conditions;
    Tensor encodings;

    // Full loss bundle. `opts` and `freeze_value_weights` control the
    // stop-gradients of the distillation path.
    LossBundle losses(const DistillOptions& opts = {}, bool freeze_value_weights = true) const;
};

ExperimentConfig check_config();
CheckFixture make_check_fixture(std::uint64_t seed = 3);

/// Finite-difference checks of the primitive ops, the layers, the detector,
/// the decoder stages, each loss and the composed total loss.
std::vector<GradCheckReport> run_gradcheck_suite(
    std::uint64_t seed = 3, const std::function<void(const GradCheckReport&)>& on_report = {});

struct RoutingAudit {
    RoutingReport deployed;
    RoutingReport mutated;  // mask detach removed from the distillation loss

    // Deployed graph clean and the mutation caught.
    bool passed() const { return deployed.passed() && !mutated.passed(); }
};

RoutingAudit run_routing_audit(std::uint64_t seed = 3);

}  // namespace icd
