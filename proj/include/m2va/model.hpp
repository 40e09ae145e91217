#pragma once

#include <optional>

#include "m2va/encoders.hpp"

namespace m2va {

struct HeadConfig {
    bool contrastive = true, cmc = true, cmlm = true, vc = true;
    double w_contrastive = 1.0, w_cmc = 1.0, w_cmlm = 1.0, w_vc = 1.0;

    bool any_enabled() const { return contrastive || cmc || cmlm || vc; }
};

// Cross-modal masked-LM block. The attention layer, layer norms and FFN are
// frozen copies of the final text-tower layer; only the inner adapter and the
// output projection train.
struct CMLMBlock {
    Tensor v2t;                       // frozen [d_vl, d_l] frame-feature input map
    TransformerLayerWeights layer;    // frozen copies
    TextAdapterWeights adapter;       // trainable
    Tensor mlm_w, mlm_b;              // trainable [d_l, vocab], [vocab]
};

struct Decoder {
    Tensor log_tau;                   // trainable; tau = exp(log_tau), clamped >= 0.01
    Tensor vc_w, vc_b;                // present when the VC head is enabled
    std::optional<CMLMBlock> cmlm;

    double tau() const { return std::exp(log_tau.item()); }
};

struct Model {
    EncoderConfig cfg;
    AdapterPlacement placement;
    HeadConfig heads;
    Vocab vocab;
    idx num_classes = 0;

    ParamRegistry params;
    VideoTower video;
    TextTower text;
    AdapterSet adapters;
    Decoder decoder;
};

constexpr double kTauInit = 0.07;
constexpr double kTauMin = 0.01;

// Builds towers, installs adapters per placement, and constructs the enabled
// decoder heads. All backbone parameters are frozen; adapters, heads and the
// temperature are trainable.
Model build_model(const EncoderConfig& cfg, const AdapterPlacement& placement,
                  const HeadConfig& heads, const Vocab& vocab, idx num_classes,
                  std::uint64_t seed);

// Closed-form trainable parameter count for the same configuration; the
// registry enumeration must match this exactly.
idx expected_trainable_params(const EncoderConfig& cfg, const AdapterPlacement& placement,
                              const HeadConfig& heads, idx vocab_size, idx num_classes);

// Full two-tower forward for one clip (adapters applied per current state).
VideoEmbedding encode_video(Model& m, const VideoClip& clip);
// Text embedding in the joint space for one token sequence.
Tensor encode_text(Model& m, const TokenSequence& seq);

void clamp_temperature(Model& m);

}  // namespace m2va
