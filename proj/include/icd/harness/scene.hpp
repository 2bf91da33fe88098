#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "icd/harness/config.hpp"
#include "icd/instance.hpp"
#include "icd/tensor.hpp"

namespace icd {

struct Scene {
    Tensor image;  // [3×H×W], values around [0,1]
    std::vector<Instance> instances;
    std::uint64_t seed = 0;
};

struct SceneConfig {
    std::size_t image_size = 64;
    std::size_t num_classes = 3;
    double noise_sigma = 0.05;
    std::size_t min_objects = 1;
    std::size_t max_objects = 4;
};

SceneConfig scene_config(const ExperimentConfig& cfg);

// Mean/std of the pixel width and height drawn for each class.
SizeGaussian class_size_distribution(std::size_t category, std::size_t image_size);
// RGB fill of a class.
std::array<double, 3> class_color(std::size_t category);

/// Axis-aligned filled rectangles on a gray background, painted in order
/// (later ones occlude earlier ones), plus Gaussian pixel noise. The scene is
/// a pure function of (cfg, seed).
Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

// Scenes seeded base_seed, base_seed+1, ...
std::vector<Scene> generate_dataset(const SceneConfig& cfg, std::size_t count, std::uint64_t base_seed);

std::vector<std::vector<Instance>> dataset_instances(const std::vector<Scene>& scenes);

// Binary PPM (P6) of a scene image, values clamped to [0,1].
void write_scene_ppm(const Scene& scene, const std::string& path);

}  // namespace icd
