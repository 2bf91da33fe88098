#pragma once

#include <vector>

#include "icd/instance.hpp"
#include "icd/nn.hpp"
#include "icd/params.hpp"
#include "icd/pyramid.hpp"

namespace icd {

struct DecoderConfig {
    std::size_t channels = 32;       // D
    std::size_t heads = 4;           // M; must divide D
    std::size_t encoding_width = 27; // width of E(y)
    std::size_t position_width = 10; // width of P_raw rows
    std::size_t cascade = 1;
    bool zero_query_init = false;    // F_q starts at zero, so every mask starts uniform

    std::size_t head_dim() const { return channels / heads; }
    void validate() const;
};

// Two-layer position-wise feed-forward block (D -> D -> D).
class FeedForward {
public:
    FeedForward(ParamGroup& group, const std::string& name, std::size_t width, Rng& rng);
    Tensor forward(const Tensor& x) const;

    Linear l1, l2;
};

// One attention + aggregation stage of the decoder.
class DecoderLayer {
public:
    DecoderLayer(ParamGroup& group, const std::string& name, const DecoderConfig& cfg, Rng& rng);

    std::vector<Linear> key, value, query;  // per head, D -> d
    Linear position;                        // F_pe: P_raw width -> D
    Linear out_proj;                        // D -> D
    FeedForward ffn;
};

enum class KnowledgeSource { teacher, student };

// Per-head attention masks over all L cells and the per-head values they
// weight. masks[j] is [N×L] (row i is m_ij), values[j] is [L×d].
struct Knowledge {
    std::vector<Tensor> masks;
    std::vector<Tensor> values;
    KnowledgeSource source = KnowledgeSource::teacher;

    std::size_t heads() const { return masks.size(); }
    std::size_t instances() const { return masks.empty() ? 0 : masks.front().size(0); }
    std::size_t length() const { return masks.empty() ? 0 : masks.front().size(1); }
};

// K_j = F^k_j(A + F_pe(P))
std::vector<Tensor> compute_keys(const DecoderLayer& layer, const FlatPyramid& flat);
// V_j = F^v_j(A). With frozen_weights the projection weights are detached.
std::vector<Tensor> compute_values(const DecoderLayer& layer, const Tensor& features,
                                   bool frozen_weights = false);
// m_ij = softmax(K_j q_ij / sqrt(d)) with q_ij = F^q_j(q_i)
std::vector<Tensor> attention_masks(const std::vector<Tensor>& keys, const Tensor& queries,
                                    const DecoderLayer& layer);
Knowledge decode_knowledge(const DecoderLayer& layer, const FlatPyramid& flat,
                           const Tensor& queries, KnowledgeSource source);
// Sum-product over masks and values, head concat, output projection,
// residual, feed-forward with residual, final parameter-free norm.
Tensor aggregate(const Knowledge& k, const Tensor& queries, const DecoderLayer& layer);

struct DecoderOutput {
    Tensor queries;       // initial q_i, [N×D]
    Knowledge knowledge;  // from the last cascade stage
    Tensor aggregated;    // g_i, [N×D]
};

/// Instance-conditional decoding module: query MLP followed by `cascade`
/// attention stages; each stage's output becomes the next stage's query.
class InstanceDecoder {
public:
    InstanceDecoder(const DecoderConfig& cfg, Rng& rng);

    InstanceDecoder(const InstanceDecoder&) = delete;
    InstanceDecoder& operator=(const InstanceDecoder&) = delete;

    DecoderOutput forward(const FlatPyramid& teacher, const Tensor& encodings) const;

    const DecoderConfig& config() const { return cfg_; }
    const Mlp3& query_mlp() const { return query_mlp_; }
    const DecoderLayer& layer(std::size_t i) const { return layers_.at(i); }
    const DecoderLayer& last_layer() const { return layers_.back(); }
    ParamGroup& params() { return group_; }
    const ParamGroup& params() const { return group_; }

private:
    DecoderConfig cfg_;
    ParamGroup group_;
    Mlp3 query_mlp_;
    std::vector<DecoderLayer> layers_;
};

}  // namespace icd
