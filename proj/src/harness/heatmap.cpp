#include "icd/harness/heatmap.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace icd {

GrayImage quantize_heatmap(std::span<const double> values, std::size_t height, std::size_t width) {
    if (values.size() != height * width) throw DimensionError("heatmap size mismatch");
    GrayImage img{width, height, std::vector<std::uint8_t>(values.size(), 128)};
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double range = *hi - *lo;
    if (range > 0.0) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / range));
        }
    }
    return img;
}

void write_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write heatmap '" + path + "'");
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read heatmap '" + path + "'");
    std::string magic;
    GrayImage img;
    int maxval = 0;
    in >> magic >> img.width >> img.height >> maxval;
    if (magic != "P5" || maxval != 255 || !in) throw std::runtime_error("'" + path + "' is not an 8-bit P5 PGM");
    in.get();
    img.pixels.resize(img.width * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw std::runtime_error("truncated PGM '" + path + "'");
    return img;
}

void write_colormap_ppm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write heatmap '" + path + "'");
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    for (std::uint8_t p : img.pixels) {
        const double v = p / 255.0;
        const std::array<double, 3> rgb{std::clamp(1.5 - std::fabs(4.0 * v - 3.0), 0.0, 1.0),
                                        std::clamp(1.5 - std::fabs(4.0 * v - 2.0), 0.0, 1.0),
                                        std::clamp(1.5 - std::fabs(4.0 * v - 1.0), 0.0, 1.0)};
        for (double c : rgb) out.put(static_cast<char>(std::lround(c * 255.0)));
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<std::string> export_attention(const Knowledge& k, std::span<const LevelGeometry> geometry,
                                          std::size_t instance, std::size_t head, const std::string& dir) {
    if (head >= k.heads() || instance >= k.instances()) {
        throw std::out_of_range("export_attention: instance/head out of range");
    }
    std::size_t total = 0;
    for (const auto& g : geometry) total += g.height * g.width;
    if (total != k.length()) throw DimensionError("export_attention: geometry does not cover the mask");

    std::filesystem::create_directories(dir);
    const auto row = k.masks[head].data().subspan(instance * k.length(), k.length());
    std::vector<std::string> paths;
    std::size_t off = 0;
    for (std::size_t lvl = 0; lvl < geometry.size(); ++lvl) {
        const auto& g = geometry[lvl];
        const std::size_t n = g.height * g.width;
        const GrayImage img = quantize_heatmap(row.subspan(off, n), g.height, g.width);
        const std::string stem = dir + "/attn_i" + std::to_string(instance) + "_h" + std::to_string(head) +
                                 "_l" + std::to_string(lvl);
        write_pgm(img, stem + ".pgm");
        write_colormap_ppm(img, stem + ".ppm");
        paths.push_back(stem + ".pgm");
        off += n;
    }
    return paths;
}

}  // namespace icd
