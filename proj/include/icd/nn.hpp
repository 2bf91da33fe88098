#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "icd/params.hpp"
#include "icd/tensor.hpp"

namespace icd {

using Rng = std::mt19937_64;

// Kaiming-uniform (fan-in) weights, zero bias.
Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng);

class Linear {
public:
    Linear(ParamGroup& group, const std::string& name, std::size_t in, std::size_t out, Rng& rng);

    // x: [in] or [N×in]
    Tensor forward(const Tensor& x) const;
    // Same map with the weights cut out of the graph: gradient still flows
    // into x but never into weight or bias.
    Tensor forward_frozen(const Tensor& x) const;

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

    Tensor weight;  // [out×in]
    Tensor bias;    // [out]

private:
    Tensor apply(const Tensor& x, const Tensor& w, const Tensor& b) const;
    std::size_t in_, out_;
};

// Linear -> ReLU -> Linear -> ReLU -> Linear
class Mlp3 {
public:
    Mlp3(ParamGroup& group, const std::string& name, std::size_t in, std::size_t hidden,
         std::size_t out, Rng& rng);

    Tensor forward(const Tensor& x) const;

    std::size_t in_features() const { return l1.in_features(); }
    std::size_t out_features() const { return l3.out_features(); }

    Linear l1, l2, l3;
};

class Conv2d {
public:
    Conv2d(ParamGroup& group, const std::string& name, std::size_t in, std::size_t out,
           std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng);

    Tensor forward(const Tensor& x) const;

    Tensor weight;  // [out×in×k×k]
    Tensor bias;    // [out]
    std::size_t stride, pad;
};

/// Fixed sine-cosine encoding of a scalar coordinate: interleaved
/// [sin(u·s_0), cos(u·s_0), sin(u·s_1), ...] with s_k = temperature^(-2k/dim).
std::vector<double> sine_pos_embed(double u, std::size_t dim, double temperature = 10000.0);

std::vector<double> one_hot(std::size_t category, std::size_t num_classes);

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { adamw, sgd_momentum };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double momentum = 0.9;
    double max_grad_norm = 0.0;  // global L2 clip over the group, 0 disables
};

struct OptimizerState {
    std::vector<std::vector<double>> first;   // momentum buffer for SGD
    std::vector<std::vector<double>> second;  // unused by SGD
    std::uint64_t steps = 0;
};

class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, const ParamGroup& group);

    // Applies one update to every parameter with a gradient, then zeroes the
    // gradients. Returns the number of parameters skipped for lack of one.
    std::size_t step();

    const OptimizerState& state() const { return state_; }
    double last_grad_norm() const { return last_norm_; }
    OptimizerConfig& config() { return cfg_; }

private:
    OptimizerConfig cfg_;
    const ParamGroup* group_;
    OptimizerState state_;
    double last_norm_ = 0.0;
};

}  // namespace icd
