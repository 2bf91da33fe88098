#pragma once

#include <span>
#include <utility>
#include <vector>

#include "icd/nn.hpp"
#include "icd/tensor.hpp"

namespace icd {

// Axis-aligned box, center + size, normalized to [0,1] image coordinates.
struct Box {
    double cx = 0.5, cy = 0.5, w = 0.0, h = 0.0;

    double x1() const { return cx - 0.5 * w; }
    double y1() const { return cy - 0.5 * h; }
    double x2() const { return cx + 0.5 * w; }
    double y2() const { return cy + 0.5 * h; }
    double area() const { return w * h; }

    static Box from_corners(double x1, double y1, double x2, double y2);
};

double iou(const Box& a, const Box& b);

// One annotation, real or sampled.
struct Instance {
    std::size_t category = 0;
    Box box;
    double w_px = 1.0, h_px = 1.0;
    bool is_real = true;
};

// Builds an instance from a normalized box, clipping it to the image and
// deriving pixel sizes from `image_size`.
Instance make_instance(std::size_t category, Box box, std::size_t image_size, bool is_real);

struct Center {
    double x = 0.5, y = 0.5;
};

// x' = x + φx·w, y' = y + φy·h with φ ~ U[-a, a], clipped to [0,1].
Center jitter_center(const Box& box, double a, Rng& rng);
// Same map with the uniform draws supplied by the caller.
Center jitter_center_with(const Box& box, double phi_x, double phi_y);

struct ScaleIndicator {
    int sx = 0, sy = 0;
    bool clamped = false;  // input below 1 px was raised to 1 px
};

// (⌊log2 w_px⌋, ⌊log2 h_px⌋)
ScaleIndicator scale_indicator(double w_px, double h_px);

struct EncodingConfig {
    std::size_t num_classes = 3;
    std::size_t pos_dim = 8;    // sine width for each of x' and y'
    std::size_t scale_dim = 4;  // sine width for each scale indicator
    double temperature = 10000.0;
    int max_level = 6;          // indicators are divided by this before encoding
    bool information_dropping = true;
    double jitter = 0.3;
    bool use_scale = true;      // false zeroes the scale block

    std::size_t width() const { return num_classes + 2 * pos_dim + 2 * scale_dim; }
};

struct EncodedInstance {
    std::vector<double> vec;
    Center center;  // the (possibly jittered) center that was encoded
};

/// one_hot(c) ‖ sine(x') ‖ sine(y') ‖ sine(sx/max) ‖ sine(sy/max)
EncodedInstance encode_instance(const Instance& y, const EncodingConfig& cfg, Rng& rng);

// Stacks encodings into [N×width].
Tensor encoding_matrix(std::span<const EncodedInstance> enc);

// q_i = F_q(E(y_i)) for a batch of encodings.
Tensor make_query(const Tensor& encodings, const Mlp3& f_q);

struct SizeGaussian {
    double mean = 0.0, std = 1.0;
};

struct DatasetStats {
    std::vector<std::size_t> class_freq;
    std::vector<SizeGaussian> width_px, height_px;
    std::size_t total = 0;
    std::size_t image_size = 64;

    static constexpr double kStdFloor = 1.0;
};

DatasetStats compute_stats(std::span<const std::vector<Instance>> scenes, std::size_t num_classes,
                           std::size_t image_size);

// Pixel size draw for one class; redraws a few times then clamps to >= 1 px.
std::pair<double, double> sample_fake_size(const DatasetStats& stats, std::size_t category,
                                           Rng& rng);

std::vector<Instance> sample_fakes(const DatasetStats& stats, std::size_t n_real, std::size_t ratio,
                                   Rng& rng);

// Reals first, followed by ratio·N_r fakes.
std::vector<Instance> build_condition_set(std::span<const Instance> reals, const DatasetStats& stats,
                                          std::size_t ratio, Rng& rng);

}  // namespace icd
