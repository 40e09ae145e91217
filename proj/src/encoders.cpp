#include "m2va/encoders.hpp"

namespace m2va {

void EncoderConfig::validate() const {
    auto positive = [](idx v, const char* name) {
        if (v <= 0) throw ConfigError(std::string("config: ") + name + " must be positive");
    };
    positive(video_layers, "video_layers");
    positive(text_layers, "text_layers");
    positive(d_v, "d_v");
    positive(d_l, "d_l");
    positive(d_vl, "d_vl");
    positive(patch, "patch");
    positive(image, "image");
    positive(frames, "frames");
    positive(heads_v, "heads_v");
    positive(heads_l, "heads_l");
    positive(mlp_ratio, "mlp_ratio");
    positive(max_text_len, "max_text_len");
    positive(adapter_ratio, "adapter_ratio");
    if (d_v % heads_v != 0)
        throw ConfigError("config: d_v " + std::to_string(d_v) + " not divisible by heads_v " +
                          std::to_string(heads_v));
    if (d_l % heads_l != 0)
        throw ConfigError("config: d_l " + std::to_string(d_l) + " not divisible by heads_l " +
                          std::to_string(heads_l));
    if (image % patch != 0)
        throw ConfigError("config: image size " + std::to_string(image) +
                          " not divisible by patch size " + std::to_string(patch));
    if (d_v % adapter_ratio != 0 || d_l % adapter_ratio != 0)
        throw ConfigError("config: adapter_ratio must divide d_v and d_l");
    if (k_t % 2 == 0 || k_s % 2 == 0)
        throw ConfigError("config: TED kernel sizes must be odd");
}

TransformerLayerWeights make_transformer_layer(ParamRegistry& reg,
                                               const std::string& prefix, idx d,
                                               idx mlp_ratio, bool trainable,
                                               RandomSource& rng) {
    TransformerLayerWeights w;
    w.ln1_g = reg.create(prefix + ".ln1.g", Tensor(Shape{d}, 1.0), trainable);
    w.ln1_b = reg.create_zeros(prefix + ".ln1.b", {d}, trainable);
    w.ln2_g = reg.create(prefix + ".ln2.g", Tensor(Shape{d}, 1.0), trainable);
    w.ln2_b = reg.create_zeros(prefix + ".ln2.b", {d}, trainable);
    w.attn.wq = reg.create_randn(prefix + ".attn.wq", {d, d}, 0.02, trainable, rng);
    w.attn.bq = reg.create_zeros(prefix + ".attn.bq", {d}, trainable);
    w.attn.wk = reg.create_randn(prefix + ".attn.wk", {d, d}, 0.02, trainable, rng);
    w.attn.bk = reg.create_zeros(prefix + ".attn.bk", {d}, trainable);
    w.attn.wv = reg.create_randn(prefix + ".attn.wv", {d, d}, 0.02, trainable, rng);
    w.attn.bv = reg.create_zeros(prefix + ".attn.bv", {d}, trainable);
    w.attn.wo = reg.create_randn(prefix + ".attn.wo", {d, d}, 0.02, trainable, rng);
    w.attn.bo = reg.create_zeros(prefix + ".attn.bo", {d}, trainable);
    idx hidden = d * mlp_ratio;
    w.ffn_w1 = reg.create_randn(prefix + ".ffn.w1", {d, hidden}, 0.02, trainable, rng);
    w.ffn_b1 = reg.create_zeros(prefix + ".ffn.b1", {hidden}, trainable);
    w.ffn_w2 = reg.create_randn(prefix + ".ffn.w2", {hidden, d}, 0.02, trainable, rng);
    w.ffn_b2 = reg.create_zeros(prefix + ".ffn.b2", {d}, trainable);
    return w;
}

VideoTower make_video_tower(ParamRegistry& reg, const EncoderConfig& cfg,
                            RandomSource& rng) {
    VideoTower t;
    idx pdim = cfg.patch * cfg.patch * 3;
    t.patch_w = reg.create_randn("video.patch.w", {pdim, cfg.d_v}, 0.02, false, rng);
    t.patch_b = reg.create_zeros("video.patch.b", {cfg.d_v}, false);
    t.class_token = reg.create_randn("video.class_token", {cfg.d_v}, 0.02, false, rng);
    t.pos = reg.create_randn("video.pos", {1 + cfg.patches_per_frame(), cfg.d_v}, 0.02,
                             false, rng);
    for (idx i = 1; i <= cfg.video_layers; ++i)
        t.layers.push_back(make_transformer_layer(
            reg, "video.layer" + std::to_string(i), cfg.d_v, cfg.mlp_ratio, false, rng));
    t.lnf_g = reg.create("video.lnf.g", Tensor(Shape{cfg.d_v}, 1.0), false);
    t.lnf_b = reg.create_zeros("video.lnf.b", {cfg.d_v}, false);
    t.proj = reg.create_randn("video.proj", {cfg.d_v, cfg.d_vl}, 0.02, false, rng);
    return t;
}

TextTower make_text_tower(ParamRegistry& reg, const EncoderConfig& cfg,
                          RandomSource& rng) {
    if (cfg.vocab_size <= 0)
        throw ConfigError("config: vocab_size must be set before building the text tower");
    TextTower t;
    t.tok_emb = reg.create_randn("text.tok_emb", {cfg.vocab_size, cfg.d_l}, 0.02, false, rng);
    t.pos = reg.create_randn("text.pos", {cfg.max_text_len, cfg.d_l}, 0.02, false, rng);
    for (idx i = 1; i <= cfg.text_layers; ++i)
        t.layers.push_back(make_transformer_layer(
            reg, "text.layer" + std::to_string(i), cfg.d_l, cfg.mlp_ratio, false, rng));
    t.lnf_g = reg.create("text.lnf.g", Tensor(Shape{cfg.d_l}, 1.0), false);
    t.lnf_b = reg.create_zeros("text.lnf.b", {cfg.d_l}, false);
    t.proj = reg.create_randn("text.proj", {cfg.d_l, cfg.d_vl}, 0.02, false, rng);
    return t;
}

Tensor transformer_block(const Tensor& x, const TransformerLayerWeights& w, idx heads,
                         const Tensor* mask, const TextAdapterWeights* pre_ffn_adapter) {
    Tensor n1 = layer_norm(x, w.ln1_g, w.ln1_b);
    Tensor h = add(x, multi_head_attention(n1, n1, w.attn, heads, mask));
    if (pre_ffn_adapter) h = text_adapter_forward(h, *pre_ffn_adapter);
    Tensor n2 = layer_norm(h, w.ln2_g, w.ln2_b);
    Tensor mid = gelu(add(matmul(n2, w.ffn_w1), w.ffn_b1));
    return add(h, add(matmul(mid, w.ffn_w2), w.ffn_b2));
}

Tensor patchify(const Tensor& frames, idx patch) {
    if (frames.ndim() != 4 || frames.dim(3) != 3)
        throw ShapeError("patchify expects [T, H, W, 3], got " + shape_str(frames.shape()));
    idx T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
    if (H % patch != 0 || W % patch != 0)
        throw ConfigError("patchify: frame size " + std::to_string(H) + "x" +
                          std::to_string(W) + " not divisible by patch " +
                          std::to_string(patch));
    idx gh = H / patch, gw = W / patch;
    idx M = gh * gw, pdim = patch * patch * 3;
    Tensor out(Shape{T, M, pdim});
    const double* src = frames.data().data();
    double* dst = out.data().data();
    for (idx t = 0; t < T; ++t)
        for (idx pi = 0; pi < gh; ++pi)
            for (idx pj = 0; pj < gw; ++pj) {
                double* o = dst + (t * M + pi * gw + pj) * pdim;
                for (idx y = 0; y < patch; ++y)
                    for (idx x = 0; x < patch; ++x)
                        for (idx c = 0; c < 3; ++c)
                            *o++ = src[((t * H + pi * patch + y) * W + pj * patch + x) * 3 + c];
            }
    return out;
}

Tensor embed_frames(const VideoClip& clip, const VideoTower& tower,
                    const EncoderConfig& cfg) {
    idx T = clip.frames.dim(0);
    Tensor patches = patchify(clip.frames, cfg.patch);               // [T, M, pdim]
    Tensor tok = add(matmul(patches, tower.patch_w), tower.patch_b); // [T, M, d_v]
    Tensor cls = add(Tensor::zeros({T, 1, cfg.d_v}), tower.class_token);
    return add(concat(1, {cls, tok}), tower.pos);
}

Tensor video_encoder_forward(const Tensor& tokens, const VideoTower& tower,
                             const AdapterSet& adapters, const EncoderConfig& cfg) {
    Tensor x = tokens;
    for (size_t i = 0; i < tower.layers.size(); ++i) {
        if (i < adapters.video.size() && adapters.video[i])
            x = ted_forward(x, *adapters.video[i], adapters.mode, adapters.order,
                            adapters.grid_h, adapters.grid_w);
        x = transformer_block(x, tower.layers[i], cfg.heads_v);
    }
    return x;
}

VideoEmbedding project_and_pool(const Tensor& feats, const VideoTower& tower) {
    idx T = feats.dim(0), d = feats.dim(2);
    Tensor cls = reshape(slice(feats, 1, 0, 1), {T, d});
    Tensor normed = layer_norm(cls, tower.lnf_g, tower.lnf_b);
    VideoEmbedding e;
    e.frame_embeds = matmul(normed, tower.proj);
    e.pooled = mean_axis0(e.frame_embeds);
    return e;
}

Tensor causal_mask(idx n) {
    Tensor m(Shape{n, n});
    for (idx i = 0; i < n; ++i)
        for (idx j = i + 1; j < n; ++j) m.data()[size_t(i * n + j)] = -1e9;
    return m;
}

Tensor text_encoder_forward(const TokenSequence& seq, const TextTower& tower,
                            const AdapterSet& adapters, const EncoderConfig& cfg) {
    idx N = static_cast<idx>(seq.ids.size());
    if (N > cfg.max_text_len)
        throw ContractError("token sequence longer than max_text_len");
    Tensor x = add(gather_rows(tower.tok_emb, seq.ids), slice(tower.pos, 0, 0, N));
    Tensor mask = causal_mask(N);
    for (size_t i = 0; i < tower.layers.size(); ++i) {
        const TextAdapterWeights* ad =
            (i < adapters.text.size() && adapters.text[i]) ? &*adapters.text[i] : nullptr;
        x = transformer_block(x, tower.layers[i], cfg.heads_l, &mask, ad);
    }
    return x;
}

Tensor project_text(const Tensor& feats, const TokenSequence& seq,
                    const TextTower& tower) {
    if (seq.eos_pos < 0 || seq.eos_pos >= feats.dim(0))
        throw ContractError("token sequence has no valid <eos> position");
    Tensor normed = layer_norm(feats, tower.lnf_g, tower.lnf_b);
    Tensor eos = gather_rows(normed, {seq.eos_pos});
    return reshape(matmul(eos, tower.proj), {tower.proj.dim(1)});
}

}  // namespace m2va
