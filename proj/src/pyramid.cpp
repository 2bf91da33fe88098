#include "icd/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace icd {

std::size_t FeaturePyramid::channels() const {
    return levels.empty() ? 0 : levels.front().feat.size(0);
}

std::size_t FeaturePyramid::cells() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.feat.size(1) * l.feat.size(2);
    return n;
}

Tensor pyramid_positions(std::span<const LevelGeometry> geometry, std::size_t pos_dim,
                         double temperature) {
    if (pos_dim == 0 || pos_dim % 4 != 0) {
        throw ConfigError("positional width must be a positive multiple of 4, got " +
                          std::to_string(pos_dim));
    }
    const std::size_t width = pos_dim + 2;
    const double last = static_cast<double>(std::max<std::size_t>(geometry.size(), 2) - 1);
    std::vector<double> data;
    for (std::size_t lvl = 0; lvl < geometry.size(); ++lvl) {
        const auto& g = geometry[lvl];
        const double tag = static_cast<double>(lvl) / last;
        for (std::size_t y = 0; y < g.height; ++y) {
            for (std::size_t x = 0; x < g.width; ++x) {
                const auto ex = sine_pos_embed((x + 0.5) / g.width, pos_dim / 2, temperature);
                const auto ey = sine_pos_embed((y + 0.5) / g.height, pos_dim / 2, temperature);
                data.insert(data.end(), ex.begin(), ex.end());
                data.insert(data.end(), ey.begin(), ey.end());
                data.push_back(std::sin(tag));
                data.push_back(std::cos(tag));
            }
        }
    }
    const Shape shape{data.size() / width, width};
    return Tensor::from(shape, std::move(data));
}

FlatPyramid flatten_pyramid(const FeaturePyramid& p, std::size_t pos_dim, double temperature) {
    if (p.levels.empty()) throw ConfigError("flatten_pyramid: empty pyramid");
    const std::size_t d = p.channels();
    FlatPyramid flat;
    std::vector<Tensor> rows;
    for (std::size_t lvl = 0; lvl < p.levels.size(); ++lvl) {
        const auto& level = p.levels[lvl];
        if (level.feat.dim() != 3 || level.feat.size(0) != d) {
            throw DimensionError("flatten_pyramid: level " + std::to_string(lvl) + " has shape " +
                                 shape_str(level.feat.shape()));
        }
        const std::size_t h = level.feat.size(1), w = level.feat.size(2);
        rows.push_back(transpose(reshape(level.feat, {d, h * w})));
        flat.geometry.push_back({level.stride, h, w});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) flat.index.push_back({lvl, y, x});
    }
    flat.features = rows.size() == 1 ? rows.front() : concat_rows(rows);
    flat.positions = pyramid_positions(flat.geometry, pos_dim, temperature);
    return flat;
}

FeaturePyramid unflatten_pyramid(const FlatPyramid& flat) {
    const std::size_t d = flat.features.size(1);
    FeaturePyramid p;
    std::size_t row = 0;
    for (const auto& g : flat.geometry) {
        std::vector<double> data(d * g.height * g.width);
        const std::size_t hw = g.height * g.width;
        for (std::size_t cell = 0; cell < hw; ++cell, ++row)
            for (std::size_t c = 0; c < d; ++c) data[c * hw + cell] = flat.features.at(row, c);
        p.levels.push_back({g.stride, Tensor::from({d, g.height, g.width}, std::move(data))});
    }
    return p;
}

// ---------------------------------------------------------------------------
// ToyDetector
// ---------------------------------------------------------------------------

namespace {

bool is_pow2(std::size_t v) { return v && !(v & (v - 1)); }

std::size_t log2_exact(std::size_t v) {
    std::size_t n = 0;
    while (v > 1) {
        v >>= 1;
        ++n;
    }
    return n;
}

}  // namespace

void DetectorConfig::validate() const {
    if (strides.empty()) throw ConfigError("detector needs at least one stride");
    for (std::size_t i = 0; i < strides.size(); ++i) {
        if (!is_pow2(strides[i]) || strides[i] < 8) {
            throw ConfigError("stride " + std::to_string(strides[i]) + " must be a power of two >= 8");
        }
        if (i && strides[i] <= strides[i - 1]) throw ConfigError("strides must strictly increase");
    }
    if (image_size == 0 || image_size % strides.back() != 0) {
        throw ConfigError("image size " + std::to_string(image_size) +
                          " is not divisible by the largest stride " + std::to_string(strides.back()));
    }
    if (channels < 2 || num_classes == 0 || in_channels == 0) throw ConfigError("bad detector widths");
}

std::vector<LevelGeometry> DetectorConfig::geometry() const {
    std::vector<LevelGeometry> g;
    for (auto s : strides) g.push_back({s, image_size / s, image_size / s});
    return g;
}

ToyDetector::ToyDetector(const DetectorConfig& cfg, Group group, Rng& rng)
    : cfg_((cfg.validate(), cfg)),
      group_(group),
      stem_(group_, "stem", cfg.in_channels, cfg.stem_width, 4, 4, 0, rng),
      tower_(group_, "head.tower", cfg.channels, cfg.channels, 3, 1, 1, rng),
      predictor_(group_, "head.pred", cfg.channels, cfg.num_classes + 4, 1, 1, 0, rng) {
    const std::size_t n_stages = log2_exact(cfg.strides.back()) - 2;
    std::size_t width = cfg.stem_width;
    for (std::size_t i = 0; i < n_stages; ++i) {
        stages_.emplace_back(group_, "stage" + std::to_string(i), width, cfg.stage_width, 3, 2, 1, rng);
        width = cfg.stage_width;
    }
    for (std::size_t l = 0; l < cfg.strides.size(); ++l) {
        level_stage_.push_back(log2_exact(cfg.strides[l]) - 3);
        laterals_.emplace_back(group_, "lateral" + std::to_string(l), cfg.stage_width, cfg.channels,
                               1, 1, 0, rng);
    }
    // Class logits start at a 1% foreground prior so the summed background
    // BCE does not swamp the first updates.
    auto& bias = predictor_.bias.impl()->data;
    for (std::size_t k = 0; k < cfg.num_classes; ++k) bias[k] = -std::log((1.0 - kClassPrior) / kClassPrior);
}

bool ToyDetector::is_backbone_param(std::string_view name) {
    return name.starts_with("stem") || name.starts_with("stage");
}

FeaturePyramid ToyDetector::backbone_forward(const Tensor& image) const {
    const Shape expect{cfg_.in_channels, cfg_.image_size, cfg_.image_size};
    if (image.shape() != expect) {
        throw ConfigError("image " + shape_str(image.shape()) + " does not match detector input " +
                          shape_str(expect));
    }
    std::vector<Tensor> stage_out;
    Tensor x = relu(stem_.forward(image));
    for (const auto& s : stages_) {
        x = relu(s.forward(x));
        stage_out.push_back(x);
    }
    FeaturePyramid p;
    for (std::size_t l = 0; l < laterals_.size(); ++l) {
        p.levels.push_back({cfg_.strides[l], laterals_[l].forward(stage_out[level_stage_[l]])});
    }
    return p;
}

DensePredictions ToyDetector::head_forward(const FeaturePyramid& p) const {
    const std::size_t c = cfg_.num_classes;
    const double img = static_cast<double>(cfg_.image_size);
    DensePredictions out;
    std::vector<Tensor> rows;
    for (const auto& level : p.levels) {
        Tensor o = predictor_.forward(relu(tower_.forward(level.feat)));
        const std::size_t h = o.size(1), w = o.size(2);
        rows.push_back(transpose(reshape(o, {c + 4, h * w})));
        const double s = static_cast<double>(level.stride) / img;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                out.centers.push_back({(x + 0.5) * s, (y + 0.5) * s});
                out.cell_scale.push_back(s);
            }
    }
    Tensor all = rows.size() == 1 ? rows.front() : concat_rows(rows);
    out.logits = slice_cols(all, 0, c);
    std::vector<double> sc;
    sc.reserve(out.cells() * 4);
    for (double s : out.cell_scale) sc.insert(sc.end(), 4, s);
    out.ltrb = mul(exp(slice_cols(all, c, c + 4)), Tensor::from({out.cells(), 4}, std::move(sc)));
    return out;
}

std::array<double, 4> ltrb_target(const Center& c, const Box& box) {
    return {c.x - box.x1(), c.y - box.y1(), box.x2() - c.x, box.y2() - c.y};
}

Tensor det_loss(const DensePredictions& preds, std::span<const Instance> instances) {
    const std::size_t cells = preds.cells();
    const std::size_t nc = preds.logits.size(1);
    std::vector<double> cls(cells * nc, 0.0), reg(cells * 4, 0.0), mask(cells * 4, 0.0);
    std::size_t npos = 0;
    for (std::size_t i = 0; i < cells; ++i) {
        const Center& c = preds.centers[i];
        const Instance* best = nullptr;
        for (const auto& inst : instances) {
            if (!inst.is_real) throw ContractError("det_loss expects real instances only");
            const Box& b = inst.box;
            if (c.x < b.x1() || c.x > b.x2() || c.y < b.y1() || c.y > b.y2()) continue;
            if (!best || b.area() < best->box.area()) best = &inst;
        }
        if (!best) continue;
        ++npos;
        cls[i * nc + best->category] = 1.0;
        const auto t = ltrb_target(c, best->box);
        for (int k = 0; k < 4; ++k) {
            reg[i * 4 + k] = t[k];
            mask[i * 4 + k] = 1.0;
        }
    }
    Tensor cls_loss = sum(bce_with_logits(preds.logits, Tensor::from({cells, nc}, std::move(cls))));
    Tensor total = cls_loss;
    if (npos > 0) {
        Tensor diff = abs(sub(preds.ltrb, Tensor::from({cells, 4}, std::move(reg))));
        total = add(total, sum(mul(diff, Tensor::from({cells, 4}, std::move(mask)))));
    }
    return scale(total, 1.0 / static_cast<double>(std::max<std::size_t>(npos, 1)));
}

std::size_t inherit_parameters(ToyDetector& student, const ToyDetector& teacher) {
    std::size_t copied = 0;
    for (const auto& p : student.params().params()) {
        if (ToyDetector::is_backbone_param(p.name)) continue;
        if (!teacher.params().contains(p.name)) continue;
        const Tensor& src = teacher.params().get(p.name);
        if (src.shape() != p.tensor.shape()) continue;
        auto& dst = p.tensor.impl()->data;
        std::copy(src.data().begin(), src.data().end(), dst.begin());
        ++copied;
    }
    if (copied == 0) std::cerr << "warning: inherit_parameters found no shape-matching tensors\n";
    return copied;
}

}  // namespace icd
