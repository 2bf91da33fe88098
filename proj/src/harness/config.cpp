#include "icd/harness/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace icd {

std::string_view variant_name(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::icd: return "icd";
        case AttentionVariant::none: return "none";
        case AttentionVariant::foreground: return "foreground";
        case AttentionVariant::fine_grained: return "fine_grained";
        case AttentionVariant::activation: return "activation";
    }
    return "?";
}

AttentionVariant parse_variant(std::string_view name) {
    for (auto v : {AttentionVariant::icd, AttentionVariant::none, AttentionVariant::foreground,
                   AttentionVariant::fine_grained, AttentionVariant::activation}) {
        if (variant_name(v) == name) return v;
    }
    throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

DetectorConfig ExperimentConfig::teacher_detector() const {
    DetectorConfig d;
    d.image_size = image_size;
    d.stem_width = teacher_stem;
    d.stage_width = teacher_stage;
    d.channels = channels;
    d.num_classes = num_classes;
    d.strides = strides;
    return d;
}

DetectorConfig ExperimentConfig::student_detector() const {
    DetectorConfig d = teacher_detector();
    d.stem_width = student_stem;
    d.stage_width = student_stage;
    return d;
}

EncodingConfig ExperimentConfig::encoding() const {
    EncodingConfig e;
    e.num_classes = num_classes;
    e.pos_dim = enc_pos_dim;
    e.scale_dim = enc_scale_dim;
    e.temperature = temperature;
    int level = 0;
    while ((std::size_t{1} << (level + 1)) <= image_size) ++level;
    e.max_level = level;
    e.information_dropping = information_dropping;
    e.jitter = jitter;
    e.use_scale = use_scale;
    return e;
}

DecoderConfig ExperimentConfig::decoder() const {
    DecoderConfig d;
    d.channels = channels;
    d.heads = heads;
    d.encoding_width = encoding().width();
    d.position_width = effective_pos_dim() + 2;
    d.cascade = cascade;
    d.zero_query_init = zero_query_init;
    return d;
}

OptimizerConfig ExperimentConfig::detector_optimizer(double lr) const {
    OptimizerConfig o;
    if (det_optimizer == "sgd") {
        o.kind = OptimizerKind::sgd_momentum;
    } else if (det_optimizer == "adamw") {
        o.kind = OptimizerKind::adamw;
    } else {
        throw ConfigError("det_optimizer must be sgd or adamw, got '" + det_optimizer + "'");
    }
    o.lr = lr;
    o.momentum = momentum;
    o.max_grad_norm = grad_clip;
    o.weight_decay = wd_detector;
    return o;
}

double ExperimentConfig::detector_lr(double lr, std::size_t it, std::size_t total) const {
    if (lr_steps) {
        if (12 * it >= 8 * total) lr *= 0.1;
        if (12 * it >= 11 * total) lr *= 0.1;
    }
    if (it >= lr_warmup) return lr;
    return lr * static_cast<double>(it + 1) / static_cast<double>(lr_warmup);
}

OptimizerConfig ExperimentConfig::decoder_optimizer() const {
    OptimizerConfig o;
    o.kind = OptimizerKind::adamw;
    o.lr = lr_decoder;
    o.weight_decay = wd_decoder;
    return o;
}

void ExperimentConfig::validate() const {
    teacher_detector().validate();
    student_detector().validate();
    decoder().validate();
    if (effective_pos_dim() % 4 != 0) {
        throw ConfigError("positional width " + std::to_string(effective_pos_dim()) +
                          " must be a multiple of 4");
    }
    if (channels / heads < 2) throw ConfigError("head width D/M must be at least 2");
    if (ablation_seeds == 0) throw ConfigError("ablation_seeds must be positive");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (jitter < 0.0) throw ConfigError("jitter must be >= 0");
    if (train_scenes == 0 || eval_scenes == 0) throw ConfigError("scene counts must be positive");
}

namespace {

struct Field {
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& v) {
    std::size_t pos = 0;
    const auto r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
}

double to_double(const std::string& v) {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
}

bool to_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw std::invalid_argument(v);
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

template <class T>
Field size_field(T ExperimentConfig::*m) {
    return {[m](ExperimentConfig& c, const std::string& v) { c.*m = static_cast<T>(to_u64(v)); },
            [m](const ExperimentConfig& c) { return std::to_string(c.*m); }};
}

Field double_field(double ExperimentConfig::*m) {
    return {[m](ExperimentConfig& c, const std::string& v) { c.*m = to_double(v); },
            [m](const ExperimentConfig& c) { return fmt_double(c.*m); }};
}

Field bool_field(bool ExperimentConfig::*m) {
    return {[m](ExperimentConfig& c, const std::string& v) { c.*m = to_bool(v); },
            [m](const ExperimentConfig& c) { return std::string(c.*m ? "1" : "0"); }};
}

const std::map<std::string, Field>& fields() {
    using C = ExperimentConfig;
    static const std::map<std::string, Field> table = {
        {"image_size", size_field(&C::image_size)},
        {"num_classes", size_field(&C::num_classes)},
        {"train_scenes", size_field(&C::train_scenes)},
        {"eval_scenes", size_field(&C::eval_scenes)},
        {"noise_sigma", double_field(&C::noise_sigma)},
        {"data_seed", size_field(&C::data_seed)},
        {"eval_seed", size_field(&C::eval_seed)},
        {"strides",
         {[](C& c, const std::string& v) {
              std::vector<std::size_t> s;
              std::stringstream ss(v);
              std::string tok;
              while (std::getline(ss, tok, ',')) s.push_back(to_u64(trim(tok)));
              if (s.empty()) throw std::invalid_argument(v);
              c.strides = s;
          },
          [](const C& c) {
              std::string out;
              for (std::size_t i = 0; i < c.strides.size(); ++i) {
                  out += (i ? "," : "") + std::to_string(c.strides[i]);
              }
              return out;
          }}},
        {"channels", size_field(&C::channels)},
        {"teacher_stem", size_field(&C::teacher_stem)},
        {"teacher_stage", size_field(&C::teacher_stage)},
        {"student_stem", size_field(&C::student_stem)},
        {"student_stage", size_field(&C::student_stage)},
        {"teacher_seed", size_field(&C::teacher_seed)},
        {"heads", size_field(&C::heads)},
        {"cascade", size_field(&C::cascade)},
        {"pos_dim", size_field(&C::pos_dim)},
        {"enc_pos_dim", size_field(&C::enc_pos_dim)},
        {"enc_scale_dim", size_field(&C::enc_scale_dim)},
        {"temperature", double_field(&C::temperature)},
        {"information_dropping", bool_field(&C::information_dropping)},
        {"jitter", double_field(&C::jitter)},
        {"use_scale", bool_field(&C::use_scale)},
        {"aux_identification", bool_field(&C::aux_identification)},
        {"aux_localization", bool_field(&C::aux_localization)},
        {"fake_ratio", size_field(&C::fake_ratio)},
        {"zero_query_init", bool_field(&C::zero_query_init)},
        {"lambda", double_field(&C::lambda)},
        {"warmup", size_field(&C::warmup)},
        {"attention_variant",
         {[](C& c, const std::string& v) { c.attention = parse_variant(v); },
          [](const C& c) { return std::string(variant_name(c.attention)); }}},
        {"inherit", bool_field(&C::inherit)},
        {"freeze_value_weights", bool_field(&C::freeze_value_weights)},
        {"baseline", bool_field(&C::baseline)},
        {"teacher_iters", size_field(&C::teacher_iters)},
        {"student_iters", size_field(&C::student_iters)},
        {"batch", size_field(&C::batch)},
        {"det_optimizer",
         {[](C& c, const std::string& v) { c.det_optimizer = v; },
          [](const C& c) { return c.det_optimizer; }}},
        {"lr_teacher", double_field(&C::lr_teacher)},
        {"lr_student", double_field(&C::lr_student)},
        {"momentum", double_field(&C::momentum)},
        {"grad_clip", double_field(&C::grad_clip)},
        {"wd_detector", double_field(&C::wd_detector)},
        {"lr_warmup", size_field(&C::lr_warmup)},
        {"lr_steps", bool_field(&C::lr_steps)},
        {"lr_decoder", double_field(&C::lr_decoder)},
        {"wd_decoder", double_field(&C::wd_decoder)},
        {"seed", size_field(&C::seed)},
        {"log_every", size_field(&C::log_every)},
        {"ablation_seeds", size_field(&C::ablation_seeds)},
    };
    return table;
}

}  // namespace

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    try {
        it->second.set(cfg, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
    }
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : fields()) keys.push_back(k);
    return keys;
}

ExperimentConfig parse_config(std::istream& in, std::vector<std::string>* defaulted) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        set_config_value(cfg, key, trim(line.substr(eq + 1)));
        seen.insert(key);
    }
    if (defaulted) {
        defaulted->clear();
        for (const auto& k : config_keys()) {
            if (!seen.count(k)) defaulted->push_back(k);
        }
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path, std::vector<std::string>* defaulted) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse_config(in, defaulted);
}

std::string dump_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const auto& [k, f] : fields()) os << k << " = " << f.get(cfg) << '\n';
    return os.str();
}

}  // namespace icd
