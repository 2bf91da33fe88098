#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icd/decoder.hpp"
#include "icd/pyramid.hpp"

namespace icd {

struct GrayImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

// Min-max normalizes to 0..255; a constant input maps to mid-gray (128).
GrayImage quantize_heatmap(std::span<const double> values, std::size_t height, std::size_t width);

void write_pgm(const GrayImage& img, const std::string& path);
GrayImage read_pgm(const std::string& path);
// Jet-style color map of the gray levels.
void write_colormap_ppm(const GrayImage& img, const std::string& path);

/// Writes mask m_ij split per pyramid level as
/// `<dir>/attn_i<i>_h<j>_l<level>.pgm` and `.ppm`. Returns the PGM paths.
std::vector<std::string> export_attention(const Knowledge& k, std::span<const LevelGeometry> geometry,
                                          std::size_t instance, std::size_t head, const std::string& dir);

}  // namespace icd
