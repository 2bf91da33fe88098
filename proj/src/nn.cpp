#include "icd/nn.hpp"

#include <cmath>

namespace icd {

Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = dist(rng);
    return Tensor::from(shape, std::move(data));
}

Linear::Linear(ParamGroup& group, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng)
    : weight(kaiming_uniform({out, in}, in, rng)), bias(Tensor::zeros({out})), in_(in), out_(out) {
    group.add(name + ".weight", weight);
    group.add(name + ".bias", bias);
}

Tensor Linear::apply(const Tensor& x, const Tensor& w, const Tensor& b) const {
    if (x.shape().back() != in_) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match width " +
                             std::to_string(in_));
    }
    if (x.dim() == 1) {
        return reshape(add_row_bias(matmul(reshape(x, {1, in_}), transpose(w)), b), {out_});
    }
    if (x.dim() != 2) throw DimensionError("linear: expected 1-D or 2-D input");
    return add_row_bias(matmul(x, transpose(w)), b);
}

Tensor Linear::forward(const Tensor& x) const { return apply(x, weight, bias); }

Tensor Linear::forward_frozen(const Tensor& x) const {
    return apply(x, detach(weight), detach(bias));
}

Mlp3::Mlp3(ParamGroup& group, const std::string& name, std::size_t in, std::size_t hidden,
           std::size_t out, Rng& rng)
    : l1(group, name + ".0", in, hidden, rng),
      l2(group, name + ".1", hidden, hidden, rng),
      l3(group, name + ".2", hidden, out, rng) {}

Tensor Mlp3::forward(const Tensor& x) const {
    return l3.forward(relu(l2.forward(relu(l1.forward(x)))));
}

Conv2d::Conv2d(ParamGroup& group, const std::string& name, std::size_t in, std::size_t out,
               std::size_t kernel, std::size_t stride_, std::size_t pad_, Rng& rng)
    : weight(kaiming_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng)),
      bias(Tensor::zeros({out})),
      stride(stride_),
      pad(pad_) {
    group.add(name + ".weight", weight);
    group.add(name + ".bias", bias);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

std::vector<double> sine_pos_embed(double u, std::size_t dim, double temperature) {
    if (dim == 0 || dim % 2 != 0) {
        throw DimensionError("sine_pos_embed: dim must be even and positive, got " +
                             std::to_string(dim));
    }
    if (!(temperature > 0.0)) throw ContractError("sine_pos_embed: temperature must be > 0");
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double s = std::pow(temperature, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
        out[2 * k] = std::sin(u * s);
        out[2 * k + 1] = std::cos(u * s);
    }
    return out;
}

std::vector<double> one_hot(std::size_t category, std::size_t num_classes) {
    if (category >= num_classes) {
        throw std::out_of_range("one_hot: category " + std::to_string(category) +
                                " out of range for " + std::to_string(num_classes) + " classes");
    }
    std::vector<double> v(num_classes, 0.0);
    v[category] = 1.0;
    return v;
}

Optimizer::Optimizer(OptimizerConfig cfg, const ParamGroup& group) : cfg_(cfg), group_(&group) {
    for (const auto& p : group.params()) {
        state_.first.emplace_back(p.tensor.numel(), 0.0);
        state_.second.emplace_back(cfg_.kind == OptimizerKind::adamw ? p.tensor.numel() : 0, 0.0);
    }
}

std::size_t Optimizer::step() {
    const auto& params = group_->params();
    if (params.size() != state_.first.size()) {
        throw ContractError("optimizer state does not match parameter group");
    }
    ++state_.steps;
    const double t = static_cast<double>(state_.steps);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.tensor.impl()->grad) sq += g * g;
    }
    last_norm_ = std::sqrt(sq);
    const double clip = cfg_.max_grad_norm > 0.0 && last_norm_ > cfg_.max_grad_norm ? cfg_.max_grad_norm / last_norm_ : 1.0;
    std::size_t skipped = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& impl = *params[k].tensor.impl();
        if (impl.grad.size() != impl.data.size()) {
            ++skipped;
            continue;
        }
        if (clip < 1.0) {
            for (auto& g : impl.grad) g *= clip;
        }
        auto& m = state_.first[k];
        if (cfg_.kind == OptimizerKind::adamw) {
            auto& v = state_.second[k];
            for (std::size_t i = 0; i < impl.data.size(); ++i) {
                const double g = impl.grad[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                impl.data[i] -= cfg_.lr * cfg_.weight_decay * impl.data[i];
                impl.data[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
        } else {
            for (std::size_t i = 0; i < impl.data.size(); ++i) {
                const double g = impl.grad[i] + cfg_.weight_decay * impl.data[i];
                m[i] = cfg_.momentum * m[i] + g;
                impl.data[i] -= cfg_.lr * m[i];
            }
        }
        std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
    }
    return skipped;
}

}  // namespace icd
