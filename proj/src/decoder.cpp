#include "icd/decoder.hpp"

#include <cmath>

namespace icd {

void DecoderConfig::validate() const {
    if (heads == 0 || channels % heads != 0) {
        throw ConfigError("head count " + std::to_string(heads) + " must divide D=" +
                          std::to_string(channels));
    }
    if (cascade == 0) throw ConfigError("cascade depth must be >= 1");
    if (encoding_width == 0 || position_width == 0) throw ConfigError("decoder widths must be positive");
}

FeedForward::FeedForward(ParamGroup& group, const std::string& name, std::size_t width, Rng& rng)
    : l1(group, name + ".0", width, width, rng), l2(group, name + ".1", width, width, rng) {}

Tensor FeedForward::forward(const Tensor& x) const { return l2.forward(relu(l1.forward(x))); }

DecoderLayer::DecoderLayer(ParamGroup& group, const std::string& name, const DecoderConfig& cfg,
                           Rng& rng)
    : position(group, name + ".pos", cfg.position_width, cfg.channels, rng),
      out_proj(group, name + ".out", cfg.channels, cfg.channels, rng),
      ffn(group, name + ".ffn", cfg.channels, rng) {
    const std::size_t d = cfg.head_dim();
    for (std::size_t j = 0; j < cfg.heads; ++j) {
        const std::string h = name + ".head" + std::to_string(j);
        key.emplace_back(group, h + ".key", cfg.channels, d, rng);
        value.emplace_back(group, h + ".value", cfg.channels, d, rng);
        query.emplace_back(group, h + ".query", cfg.channels, d, rng);
        if (cfg.zero_query_init) {
            for (auto& x : query.back().weight.impl()->data) x = 0.0;
        }
    }
}

std::vector<Tensor> compute_keys(const DecoderLayer& layer, const FlatPyramid& flat) {
    const Tensor s = add(flat.features, layer.position.forward(flat.positions));
    std::vector<Tensor> keys;
    keys.reserve(layer.key.size());
    for (const auto& k : layer.key) keys.push_back(k.forward(s));
    return keys;
}

std::vector<Tensor> compute_values(const DecoderLayer& layer, const Tensor& features,
                                   bool frozen_weights) {
    std::vector<Tensor> values;
    values.reserve(layer.value.size());
    for (const auto& v : layer.value) {
        values.push_back(frozen_weights ? v.forward_frozen(features) : v.forward(features));
    }
    return values;
}

std::vector<Tensor> attention_masks(const std::vector<Tensor>& keys, const Tensor& queries,
                                    const DecoderLayer& layer) {
    if (keys.size() != layer.query.size()) throw DimensionError("attention_masks: head count mismatch");
    std::vector<Tensor> masks;
    masks.reserve(keys.size());
    for (std::size_t j = 0; j < keys.size(); ++j) {
        const Tensor qj = layer.query[j].forward(queries);  // [N×d]
        const double inv = 1.0 / std::sqrt(static_cast<double>(qj.size(1)));
        masks.push_back(softmax(scale(matmul(qj, transpose(keys[j])), inv)));
    }
    return masks;
}

Knowledge decode_knowledge(const DecoderLayer& layer, const FlatPyramid& flat, const Tensor& queries,
                           KnowledgeSource source) {
    Knowledge k;
    k.source = source;
    k.masks = attention_masks(compute_keys(layer, flat), queries, layer);
    k.values = compute_values(layer, flat.features);
    return k;
}

Tensor aggregate(const Knowledge& k, const Tensor& queries, const DecoderLayer& layer) {
    std::vector<Tensor> heads;
    heads.reserve(k.heads());
    for (std::size_t j = 0; j < k.heads(); ++j) heads.push_back(matmul(k.masks[j], k.values[j]));
    const Tensor o = layer.out_proj.forward(heads.size() == 1 ? heads.front() : concat_cols(heads));
    const Tensor u = add(queries, o);
    const Tensor g = add(u, layer.ffn.forward(layernorm_pf(u)));
    return layernorm_pf(g);
}

InstanceDecoder::InstanceDecoder(const DecoderConfig& cfg, Rng& rng)
    : cfg_((cfg.validate(), cfg)),
      group_(Group::decoder),
      query_mlp_(group_, "query_mlp", cfg.encoding_width, cfg.channels, cfg.channels, rng) {
    for (std::size_t i = 0; i < cfg.cascade; ++i) {
        layers_.emplace_back(group_, "layer" + std::to_string(i), cfg, rng);
    }
}

DecoderOutput InstanceDecoder::forward(const FlatPyramid& teacher, const Tensor& encodings) const {
    DecoderOutput out;
    out.queries = make_query(encodings, query_mlp_);
    Tensor q = out.queries;
    for (const auto& layer : layers_) {
        out.knowledge = decode_knowledge(layer, teacher, q, KnowledgeSource::teacher);
        q = aggregate(out.knowledge, q, layer);
    }
    out.aggregated = q;
    return out;
}

}  // namespace icd
