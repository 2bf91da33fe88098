#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "icd/decoder.hpp"
#include "icd/instance.hpp"
#include "icd/losses.hpp"
#include "icd/nn.hpp"
#include "icd/pyramid.hpp"

namespace icd {

enum class AttentionVariant { icd, none, foreground, fine_grained, activation };

std::string_view variant_name(AttentionVariant v);
AttentionVariant parse_variant(std::string_view name);

/// Every knob of one experiment. Defaults are the desk-scale settings.
struct ExperimentConfig {
    // Data
    std::size_t image_size = 64;
    std::size_t num_classes = 3;
    std::size_t train_scenes = 1024;
    std::size_t eval_scenes = 1024;
    double noise_sigma = 0.05;
    std::uint64_t data_seed = 1000;
    std::uint64_t eval_seed = 900000;  // far from the training seed range

    // Detectors
    std::vector<std::size_t> strides{8, 16};
    std::size_t channels = 32;
    std::size_t teacher_stem = 16;
    std::size_t teacher_stage = 32;
    std::size_t student_stem = 8;
    std::size_t student_stage = 16;
    std::uint64_t teacher_seed = 7;

    // Decoder and instance encoding
    std::size_t heads = 4;
    std::size_t cascade = 1;
    std::size_t pos_dim = 0;  // raw positional width of P; 0 selects D/M
    std::size_t enc_pos_dim = 8;
    std::size_t enc_scale_dim = 4;
    double temperature = 10000.0;
    bool information_dropping = true;
    double jitter = 0.3;
    bool use_scale = true;
    bool aux_identification = true;
    bool aux_localization = true;
    std::size_t fake_ratio = 5;
    bool zero_query_init = true;

    // Distillation
    double lambda = 8.0;
    std::size_t warmup = 100;
    AttentionVariant attention = AttentionVariant::icd;
    bool inherit = false;
    bool freeze_value_weights = true;  // detach F_v weights on the student path
    bool baseline = false;             // det loss only, no decoder

    // Optimization
    std::size_t teacher_iters = 2000;
    std::size_t student_iters = 600;
    std::size_t batch = 8;
    std::string det_optimizer = "sgd";
    double lr_teacher = 0.01;
    double lr_student = 0.01;
    double momentum = 0.9;
    double grad_clip = 5.0;  // max global gradient norm for the detectors, 0 disables
    double wd_detector = 1e-4;
    std::size_t lr_warmup = 100;  // linear detector learning-rate ramp, in iterations
    bool lr_steps = true;         // x0.1 at 8/12 and again at 11/12 of the run
    double lr_decoder = 1e-4;
    double wd_decoder = 1e-4;
    std::uint64_t seed = 1;
    std::size_t log_every = 50;
    std::size_t ablation_seeds = 1;  // seeds seed, seed+1, ... per ablation setting

    std::size_t effective_pos_dim() const { return pos_dim ? pos_dim : channels / heads; }

    DetectorConfig teacher_detector() const;
    DetectorConfig student_detector() const;
    EncodingConfig encoding() const;
    DecoderConfig decoder() const;
    OptimizerConfig detector_optimizer(double lr) const;
    OptimizerConfig decoder_optimizer() const;
    // Detector learning rate at iteration `it` of a schedule with base rate `lr`.
    double detector_lr(double lr, std::size_t it, std::size_t total) const;
    AuxTaskFlags aux_flags() const { return {aux_identification, aux_localization}; }

    void validate() const;
};

/// Parses `key = value` lines; `#` starts a comment, later keys override
/// earlier ones. Unknown keys throw. Keys absent from the file keep their
/// defaults and are listed in `*defaulted` when provided.
ExperimentConfig parse_config(std::istream& in, std::vector<std::string>* defaulted = nullptr);
ExperimentConfig load_config(const std::string& path, std::vector<std::string>* defaulted = nullptr);

// Applies one key/value pair; throws ConfigError for unknown keys or bad values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

std::vector<std::string> config_keys();

// Canonical `key = value` dump of every field.
std::string dump_config(const ExperimentConfig& cfg);

}  // namespace icd
