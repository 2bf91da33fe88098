#include "icd/harness/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace icd {

SceneConfig scene_config(const ExperimentConfig& cfg) {
    SceneConfig s;
    s.image_size = cfg.image_size;
    s.num_classes = cfg.num_classes;
    s.noise_sigma = cfg.noise_sigma;
    return s;
}

SizeGaussian class_size_distribution(std::size_t category, std::size_t image_size) {
    const double img = static_cast<double>(image_size);
    const double mean = img * (0.16 + 0.12 * static_cast<double>(category % 4));
    return {mean, 0.12 * mean + 1.0};
}

std::array<double, 3> class_color(std::size_t category) {
    static const std::array<std::array<double, 3>, 6> palette{{
        {0.9, 0.15, 0.15},
        {0.15, 0.8, 0.2},
        {0.2, 0.3, 0.95},
        {0.95, 0.85, 0.1},
        {0.85, 0.2, 0.85},
        {0.1, 0.85, 0.85},
    }};
    return palette[category % palette.size()];
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = cfg.image_size;
    const double img = static_cast<double>(n);
    Scene scene;
    scene.seed = seed;

    std::vector<double> pix(3 * n * n, 0.5);
    std::uniform_int_distribution<std::size_t> count(cfg.min_objects, cfg.max_objects);
    std::uniform_int_distribution<std::size_t> pick_class(0, cfg.num_classes - 1);
    const std::size_t objects = count(rng);
    for (std::size_t k = 0; k < objects; ++k) {
        const std::size_t c = pick_class(rng);
        const SizeGaussian g = class_size_distribution(c, n);
        std::normal_distribution<double> size(g.mean, g.std);
        auto draw = [&] {
            return static_cast<std::size_t>(std::clamp(std::lround(size(rng)), 3L, static_cast<long>(n) - 2));
        };
        const std::size_t w = draw();
        const std::size_t h = draw();
        std::uniform_int_distribution<std::size_t> px(0, n - w), py(0, n - h);
        const std::size_t x0 = px(rng), y0 = py(rng);
        const auto color = class_color(c);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = y0; y < y0 + h; ++y)
                for (std::size_t x = x0; x < x0 + w; ++x) pix[(ch * n + y) * n + x] = color[ch];
        const Box box = Box::from_corners(x0 / img, y0 / img, (x0 + w) / img, (y0 + h) / img);
        scene.instances.push_back(make_instance(c, box, n, true));
    }
    if (cfg.noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        for (auto& v : pix) v += noise(rng);
    }
    scene.image = Tensor::from({3, n, n}, std::move(pix));
    return scene;
}

std::vector<Scene> generate_dataset(const SceneConfig& cfg, std::size_t count, std::uint64_t base_seed) {
    std::vector<Scene> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(cfg, base_seed + i));
    return out;
}

std::vector<std::vector<Instance>> dataset_instances(const std::vector<Scene>& scenes) {
    std::vector<std::vector<Instance>> out;
    out.reserve(scenes.size());
    for (const auto& s : scenes) out.push_back(s.instances);
    return out;
}

void write_scene_ppm(const Scene& scene, const std::string& path) {
    const std::size_t h = scene.image.size(1), w = scene.image.size(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "P6\n" << w << ' ' << h << "\n255\n";
    const auto d = scene.image.data();
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(d[(c * h + y) * w + x], 0.0, 1.0);
                out.put(static_cast<char>(std::lround(v * 255.0)));
            }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace icd
