#pragma once

#include <string>
#include <vector>

#include "m2va/adapters.hpp"
#include "m2va/params.hpp"
#include "m2va/tensor.hpp"
#include "m2va/vocab.hpp"

namespace m2va {

struct EncoderConfig {
    idx video_layers = 4;
    idx text_layers = 4;
    idx d_v = 64;
    idx d_l = 48;
    idx d_vl = 32;
    idx patch = 8;
    idx image = 24;      // H == W
    idx frames = 8;      // default T
    idx heads_v = 4;
    idx heads_l = 4;
    idx mlp_ratio = 2;
    idx max_text_len = 12;
    idx vocab_size = 0;  // filled from the vocabulary
    idx adapter_ratio = 4;  // bottleneck r = d / ratio
    idx k_t = 3, k_s = 3;   // TED conv kernel sizes

    idx grid() const { return image / patch; }
    idx patches_per_frame() const { return grid() * grid(); }
    idx ted_r() const { return d_v / adapter_ratio; }
    idx text_r() const { return d_l / adapter_ratio; }
    void validate() const;
};

struct VideoClip {
    Tensor frames;  // [T, H, W, 3], roughly zero-mean unit-scale pixels
};

struct TransformerLayerWeights {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionWeights attn;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct VideoTower {
    Tensor patch_w, patch_b;   // [P*P*3, d_v], [d_v]
    Tensor class_token;        // [d_v], shared across frames
    Tensor pos;                // [1+M, d_v], shared across frames
    std::vector<TransformerLayerWeights> layers;
    Tensor lnf_g, lnf_b;
    Tensor proj;               // h_v: [d_v, d_vl]
};

struct TextTower {
    Tensor tok_emb;            // [vocab, d_l]
    Tensor pos;                // [max_text_len, d_l]
    std::vector<TransformerLayerWeights> layers;
    Tensor lnf_g, lnf_b;
    Tensor proj;               // h_l: [d_l, d_vl]
};

struct VideoEmbedding {
    Tensor frame_embeds;  // [T, d_vl], per-frame class-token projections
    Tensor pooled;        // [d_vl], temporal mean
};

TransformerLayerWeights make_transformer_layer(ParamRegistry& reg,
                                               const std::string& prefix, idx d,
                                               idx mlp_ratio, bool trainable,
                                               RandomSource& rng);
VideoTower make_video_tower(ParamRegistry& reg, const EncoderConfig& cfg,
                            RandomSource& rng);
TextTower make_text_tower(ParamRegistry& reg, const EncoderConfig& cfg,
                          RandomSource& rng);

// Pre-norm block: x + attn(ln1(x)), optional adapter, then x + ffn(ln2(x)).
Tensor transformer_block(const Tensor& x, const TransformerLayerWeights& w, idx heads,
                         const Tensor* mask = nullptr,
                         const TextAdapterWeights* pre_ffn_adapter = nullptr);

// Frame pixels -> patch token matrix [T, M, P*P*3]; pure data rearrangement.
Tensor patchify(const Tensor& frames, idx patch);
// Eq-1 style frame tokens: [class, patches] + positional encoding.
Tensor embed_frames(const VideoClip& clip, const VideoTower& tower,
                    const EncoderConfig& cfg);
// Runs the frozen stack with TED adapters applied before their layers.
Tensor video_encoder_forward(const Tensor& tokens, const VideoTower& tower,
                             const AdapterSet& adapters, const EncoderConfig& cfg);
VideoEmbedding project_and_pool(const Tensor& feats, const VideoTower& tower);

Tensor causal_mask(idx n);
Tensor text_encoder_forward(const TokenSequence& seq, const TextTower& tower,
                            const AdapterSet& adapters, const EncoderConfig& cfg);
Tensor project_text(const Tensor& feats, const TokenSequence& seq,
                    const TextTower& tower);

}  // namespace m2va
