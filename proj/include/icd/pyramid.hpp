#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include "icd/instance.hpp"
#include "icd/nn.hpp"
#include "icd/params.hpp"

namespace icd {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PyramidLevel {
    std::size_t stride = 8;
    Tensor feat;  // [D×H×W]
};

struct FeaturePyramid {
    std::vector<PyramidLevel> levels;

    std::size_t channels() const;
    std::size_t cells() const;
};

struct CellIndex {
    std::size_t level = 0, y = 0, x = 0;
};

struct LevelGeometry {
    std::size_t stride = 0, height = 0, width = 0;
};

// Unconditional knowledge: all pyramid cells stacked into one matrix.
struct FlatPyramid {
    Tensor features;   // A: [L×D]
    Tensor positions;  // P_raw: [L×(pos_dim+2)], fixed
    std::vector<CellIndex> index;
    std::vector<LevelGeometry> geometry;

    std::size_t length() const { return index.size(); }
};

// Rows are level-major, then row-major within a level. Positions hold
// sine(x_norm) ‖ sine(y_norm) (pos_dim/2 each) ‖ a sin/cos level tag.
FlatPyramid flatten_pyramid(const FeaturePyramid& p, std::size_t pos_dim,
                            double temperature = 10000.0);
// Value-only inverse of flatten_pyramid.
FeaturePyramid unflatten_pyramid(const FlatPyramid& flat);
// Positional rows for a geometry without touching features.
Tensor pyramid_positions(std::span<const LevelGeometry> geometry, std::size_t pos_dim,
                         double temperature = 10000.0);

struct DetectorConfig {
    std::size_t image_size = 64;
    std::size_t in_channels = 3;
    std::size_t stem_width = 8;
    std::size_t stage_width = 16;
    std::size_t channels = 32;  // D
    std::size_t num_classes = 3;
    std::vector<std::size_t> strides{8, 16};

    void validate() const;
    std::vector<LevelGeometry> geometry() const;
};

// Per-cell predictions over the flattened pyramid.
struct DensePredictions {
    Tensor logits;  // [L×C]
    Tensor ltrb;    // [L×4], normalized image units, nonnegative
    std::vector<Center> centers;
    std::vector<double> cell_scale;  // stride / image_size per cell

    std::size_t cells() const { return centers.size(); }
};

inline constexpr double kClassPrior = 0.01;

/// Dense single-stage detector: 4x4/4 stem, 3x3/2 stages, 1x1 laterals to
/// D channels, and a head (3x3 tower + 1x1 predictor) shared across levels.
class ToyDetector {
public:
    ToyDetector(const DetectorConfig& cfg, Group group, Rng& rng);

    ToyDetector(const ToyDetector&) = delete;
    ToyDetector& operator=(const ToyDetector&) = delete;

    FeaturePyramid backbone_forward(const Tensor& image) const;
    DensePredictions head_forward(const FeaturePyramid& p) const;

    const DetectorConfig& config() const { return cfg_; }
    ParamGroup& params() { return group_; }
    const ParamGroup& params() const { return group_; }

    static bool is_backbone_param(std::string_view name);

private:
    DetectorConfig cfg_;
    ParamGroup group_;
    Conv2d stem_;
    std::vector<Conv2d> stages_;
    std::vector<Conv2d> laterals_;
    Conv2d tower_;
    Conv2d predictor_;
    std::vector<std::size_t> level_stage_;  // stage feeding each level
};

// Positive cells: center inside a real box, smallest area wins. Loss is
// summed BCE over all cells and classes plus L1 on ltrb for positives,
// divided by max(1, #positives).
Tensor det_loss(const DensePredictions& preds, std::span<const Instance> instances);

// Regression targets for a cell center inside `box`.
std::array<double, 4> ltrb_target(const Center& c, const Box& box);

// Copies every non-backbone student tensor whose teacher counterpart has the
// same name and shape. Returns the number of tensors copied.
std::size_t inherit_parameters(ToyDetector& student, const ToyDetector& teacher);

}  // namespace icd
