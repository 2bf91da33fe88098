#include "icd/instance.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace icd {

namespace {

// Corners sit on a 2^-24 grid and jitter offsets on a 2^-26 grid, so every
// ltrb target and its sums are exact in double precision.
constexpr double kCornerGrid = 16777216.0;
constexpr double kOffsetGrid = 67108864.0;

double snap_corner(double v) { return std::round(v * kCornerGrid) / kCornerGrid; }

}  // namespace

Box Box::from_corners(double x1, double y1, double x2, double y2) {
    return Box{0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
}

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

Instance make_instance(std::size_t category, Box box, std::size_t image_size, bool is_real) {
    const double x1 = snap_corner(std::clamp(box.x1(), 0.0, 1.0)), x2 = snap_corner(std::clamp(box.x2(), 0.0, 1.0));
    const double y1 = snap_corner(std::clamp(box.y1(), 0.0, 1.0)), y2 = snap_corner(std::clamp(box.y2(), 0.0, 1.0));
    if (!(x2 > x1) || !(y2 > y1)) throw ContractError("instance box is empty after clipping");
    Instance inst;
    inst.category = category;
    inst.box = Box::from_corners(x1, y1, x2, y2);
    inst.w_px = inst.box.w * static_cast<double>(image_size);
    inst.h_px = inst.box.h * static_cast<double>(image_size);
    inst.is_real = is_real;
    return inst;
}

Center jitter_center_with(const Box& box, double phi_x, double phi_y) {
    // truncation toward zero keeps |offset| <= |phi|·size
    const double dx = std::trunc(phi_x * box.w * kOffsetGrid) / kOffsetGrid;
    const double dy = std::trunc(phi_y * box.h * kOffsetGrid) / kOffsetGrid;
    return Center{std::clamp(box.cx + dx, 0.0, 1.0), std::clamp(box.cy + dy, 0.0, 1.0)};
}

Center jitter_center(const Box& box, double a, Rng& rng) {
    if (a < 0.0) throw ContractError("jitter amplitude must be >= 0");
    std::uniform_real_distribution<double> phi(-a, a);
    const double px = phi(rng);
    const double py = phi(rng);
    return jitter_center_with(box, px, py);
}

ScaleIndicator scale_indicator(double w_px, double h_px) {
    ScaleIndicator s;
    if (w_px < 1.0 || h_px < 1.0) {
        s.clamped = true;
        std::cerr << "warning: scale_indicator clamped sub-pixel size (" << w_px << ", " << h_px
                  << ") to 1 px\n";
        w_px = std::max(w_px, 1.0);
        h_px = std::max(h_px, 1.0);
    }
    s.sx = static_cast<int>(std::floor(std::log2(w_px)));
    s.sy = static_cast<int>(std::floor(std::log2(h_px)));
    return s;
}

EncodedInstance encode_instance(const Instance& y, const EncodingConfig& cfg, Rng& rng) {
    EncodedInstance out;
    out.center = cfg.information_dropping ? jitter_center(y.box, cfg.jitter, rng)
                                          : Center{y.box.cx, y.box.cy};
    out.vec.reserve(cfg.width());

    auto append = [&out](const std::vector<double>& v) { out.vec.insert(out.vec.end(), v.begin(), v.end()); };
    append(one_hot(y.category, cfg.num_classes));
    append(sine_pos_embed(out.center.x, cfg.pos_dim, cfg.temperature));
    append(sine_pos_embed(out.center.y, cfg.pos_dim, cfg.temperature));
    if (cfg.use_scale) {
        const auto s = scale_indicator(y.w_px, y.h_px);
        const double norm = static_cast<double>(std::max(cfg.max_level, 1));
        append(sine_pos_embed(s.sx / norm, cfg.scale_dim, cfg.temperature));
        append(sine_pos_embed(s.sy / norm, cfg.scale_dim, cfg.temperature));
    } else {
        out.vec.insert(out.vec.end(), 2 * cfg.scale_dim, 0.0);
    }
    return out;
}

Tensor encoding_matrix(std::span<const EncodedInstance> enc) {
    if (enc.empty()) throw DimensionError("encoding_matrix: no instances");
    const std::size_t width = enc.front().vec.size();
    std::vector<double> data;
    data.reserve(enc.size() * width);
    for (const auto& e : enc) {
        if (e.vec.size() != width) throw DimensionError("encoding_matrix: ragged encodings");
        data.insert(data.end(), e.vec.begin(), e.vec.end());
    }
    return Tensor::from({enc.size(), width}, std::move(data));
}

Tensor make_query(const Tensor& encodings, const Mlp3& f_q) {
    return f_q.forward(encodings);
}

DatasetStats compute_stats(std::span<const std::vector<Instance>> scenes, std::size_t num_classes,
                           std::size_t image_size) {
    DatasetStats stats;
    stats.image_size = image_size;
    stats.class_freq.assign(num_classes, 0);
    std::vector<std::vector<double>> ws(num_classes), hs(num_classes);
    for (const auto& scene : scenes) {
        for (const auto& inst : scene) {
            if (!inst.is_real) continue;
            if (inst.category >= num_classes) throw std::out_of_range("compute_stats: bad category");
            ++stats.class_freq[inst.category];
            ws[inst.category].push_back(inst.w_px);
            hs[inst.category].push_back(inst.h_px);
            ++stats.total;
        }
    }
    if (stats.total == 0) throw ContractError("compute_stats: dataset has no real instances");

    auto fit = [](const std::vector<double>& v) {
        SizeGaussian g;
        if (v.empty()) return g;
        g.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - g.mean) * (x - g.mean);
        const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        g.std = std::max(sd, DatasetStats::kStdFloor);
        return g;
    };
    for (std::size_t c = 0; c < num_classes; ++c) {
        stats.width_px.push_back(fit(ws[c]));
        stats.height_px.push_back(fit(hs[c]));
    }
    return stats;
}

std::pair<double, double> sample_fake_size(const DatasetStats& stats, std::size_t category, Rng& rng) {
    auto draw = [&rng](const SizeGaussian& g) {
        std::normal_distribution<double> dist(g.mean, g.std);
        for (int attempt = 0; attempt < 8; ++attempt) {
            const double v = dist(rng);
            if (v >= 1.0) return v;
        }
        return 1.0;
    };
    const double w = draw(stats.width_px.at(category));
    const double h = draw(stats.height_px.at(category));
    return {w, h};
}

std::vector<Instance> sample_fakes(const DatasetStats& stats, std::size_t n_real, std::size_t ratio,
                                   Rng& rng) {
    if (stats.total == 0 || stats.class_freq.empty()) {
        throw ContractError("sample_fakes: empty dataset statistics");
    }
    std::discrete_distribution<std::size_t> pick_class(stats.class_freq.begin(), stats.class_freq.end());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double img = static_cast<double>(stats.image_size);

    std::vector<Instance> fakes;
    fakes.reserve(n_real * ratio);
    for (std::size_t k = 0; k < n_real * ratio; ++k) {
        const std::size_t c = pick_class(rng);
        const auto [w_px, h_px] = sample_fake_size(stats, c, rng);
        const double cx = unit(rng);
        const double cy = unit(rng);
        Box box{cx, cy, std::min(w_px / img, 2.0), std::min(h_px / img, 2.0)};
        fakes.push_back(make_instance(c, box, stats.image_size, false));
    }
    return fakes;
}

std::vector<Instance> build_condition_set(std::span<const Instance> reals, const DatasetStats& stats,
                                          std::size_t ratio, Rng& rng) {
    std::vector<Instance> out(reals.begin(), reals.end());
    auto fakes = sample_fakes(stats, reals.size(), ratio, rng);
    out.insert(out.end(), fakes.begin(), fakes.end());
    return out;
}

}  // namespace icd
