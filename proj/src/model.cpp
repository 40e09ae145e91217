#include "m2va/model.hpp"

#include <cmath>

namespace m2va {

namespace {

void check_placement(const AdapterPlacement& p, const EncoderConfig& cfg) {
    for (idx i : p.video_layers)
        if (i < 1 || i > cfg.video_layers)
            throw ConfigError("placement: video layer index " + std::to_string(i) +
                              " outside [1, " + std::to_string(cfg.video_layers) + "]");
    for (idx i : p.text_layers)
        if (i < 1 || i > cfg.text_layers)
            throw ConfigError("placement: text layer index " + std::to_string(i) +
                              " outside [1, " + std::to_string(cfg.text_layers) + "]");
}

Tensor frozen_copy(ParamRegistry& reg, const std::string& name, const Tensor& src) {
    return reg.create(name, Tensor(src.shape(), std::vector<double>(src.data())), false);
}

TransformerLayerWeights copy_layer_frozen(ParamRegistry& reg, const std::string& prefix,
                                          const TransformerLayerWeights& src) {
    TransformerLayerWeights w;
    w.ln1_g = frozen_copy(reg, prefix + ".ln1.g", src.ln1_g);
    w.ln1_b = frozen_copy(reg, prefix + ".ln1.b", src.ln1_b);
    w.ln2_g = frozen_copy(reg, prefix + ".ln2.g", src.ln2_g);
    w.ln2_b = frozen_copy(reg, prefix + ".ln2.b", src.ln2_b);
    w.attn.wq = frozen_copy(reg, prefix + ".attn.wq", src.attn.wq);
    w.attn.bq = frozen_copy(reg, prefix + ".attn.bq", src.attn.bq);
    w.attn.wk = frozen_copy(reg, prefix + ".attn.wk", src.attn.wk);
    w.attn.bk = frozen_copy(reg, prefix + ".attn.bk", src.attn.bk);
    w.attn.wv = frozen_copy(reg, prefix + ".attn.wv", src.attn.wv);
    w.attn.bv = frozen_copy(reg, prefix + ".attn.bv", src.attn.bv);
    w.attn.wo = frozen_copy(reg, prefix + ".attn.wo", src.attn.wo);
    w.attn.bo = frozen_copy(reg, prefix + ".attn.bo", src.attn.bo);
    w.ffn_w1 = frozen_copy(reg, prefix + ".ffn.w1", src.ffn_w1);
    w.ffn_b1 = frozen_copy(reg, prefix + ".ffn.b1", src.ffn_b1);
    w.ffn_w2 = frozen_copy(reg, prefix + ".ffn.w2", src.ffn_w2);
    w.ffn_b2 = frozen_copy(reg, prefix + ".ffn.b2", src.ffn_b2);
    return w;
}

}  // namespace

Model build_model(const EncoderConfig& cfg, const AdapterPlacement& placement,
                  const HeadConfig& heads, const Vocab& vocab, idx num_classes,
                  std::uint64_t seed) {
    EncoderConfig c = cfg;
    c.vocab_size = vocab.size();
    c.validate();
    check_placement(placement, c);
    if (!heads.any_enabled())
        throw ConfigError("at least one decoder head must be enabled");
    if (num_classes < 1) throw ConfigError("num_classes must be positive");

    Model m;
    m.cfg = c;
    m.placement = placement;
    m.heads = heads;
    m.vocab = vocab;
    m.num_classes = num_classes;

    RandomSource rng(seed);
    m.video = make_video_tower(m.params, c, rng);
    m.text = make_text_tower(m.params, c, rng);

    m.adapters.mode = placement.ted_mode;
    m.adapters.order = placement.seq_order;
    m.adapters.grid_h = c.grid();
    m.adapters.grid_w = c.grid();
    m.adapters.video.resize(static_cast<size_t>(c.video_layers));
    for (idx i : placement.video_layers)
        m.adapters.video[static_cast<size_t>(i - 1)] =
            make_ted_adapter(m.params, "video.layer" + std::to_string(i) + ".ted", c.d_v,
                             c.ted_r(), c.k_t, c.k_s, rng);
    m.adapters.text.resize(static_cast<size_t>(c.text_layers));
    for (idx i : placement.text_layers)
        m.adapters.text[static_cast<size_t>(i - 1)] = make_text_adapter(
            m.params, "text.layer" + std::to_string(i) + ".adapter", c.d_l, c.text_r(), rng);

    m.decoder.log_tau =
        m.params.create("decoder.log_tau", Tensor::scalar(std::log(kTauInit)), true);
    if (heads.vc) {
        m.decoder.vc_w =
            m.params.create_zeros("decoder.vc.w", {c.d_vl, num_classes}, true);
        m.decoder.vc_b = m.params.create_zeros("decoder.vc.b", {num_classes}, true);
    }
    if (heads.cmlm) {
        CMLMBlock blk;
        blk.v2t = m.params.create_randn("decoder.cmlm.v2t", {c.d_vl, c.d_l}, 0.02, false, rng);
        blk.layer = copy_layer_frozen(m.params, "decoder.cmlm.layer",
                                      m.text.layers.back());
        blk.adapter =
            make_text_adapter(m.params, "decoder.cmlm.adapter", c.d_l, c.text_r(), rng);
        blk.mlm_w = m.params.create_randn("decoder.cmlm.mlm.w", {c.d_l, vocab.size()}, 0.02,
                                          true, rng);
        blk.mlm_b = m.params.create_zeros("decoder.cmlm.mlm.b", {vocab.size()}, true);
        m.decoder.cmlm = std::move(blk);
    }
    return m;
}

idx expected_trainable_params(const EncoderConfig& cfg, const AdapterPlacement& placement,
                              const HeadConfig& heads, idx vocab_size, idx num_classes) {
    idx d = cfg.d_v, r = cfg.ted_r();
    idx ted = (d * r + r) + (r * d + d) + (cfg.k_t * r * r + r) +
              (cfg.k_s * cfg.k_s * r * r + r);
    idx dl = cfg.d_l, rl = cfg.text_r();
    idx text_adapter = (dl * rl + rl) + (rl * dl + dl);
    idx total = static_cast<idx>(placement.video_layers.size()) * ted +
                static_cast<idx>(placement.text_layers.size()) * text_adapter;
    total += 1;  // log_tau
    if (heads.vc) total += cfg.d_vl * num_classes + num_classes;
    if (heads.cmlm) total += text_adapter + dl * vocab_size + vocab_size;
    return total;
}

VideoEmbedding encode_video(Model& m, const VideoClip& clip) {
    Tensor tokens = embed_frames(clip, m.video, m.cfg);
    Tensor feats = video_encoder_forward(tokens, m.video, m.adapters, m.cfg);
    return project_and_pool(feats, m.video);
}

Tensor encode_text(Model& m, const TokenSequence& seq) {
    Tensor feats = text_encoder_forward(seq, m.text, m.adapters, m.cfg);
    return project_text(feats, seq, m.text);
}

void clamp_temperature(Model& m) {
    double lo = std::log(kTauMin);
    double& v = m.decoder.log_tau.data()[0];
    if (v < lo) v = lo;
}

}  // namespace m2va
