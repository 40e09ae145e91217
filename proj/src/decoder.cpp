#include "m2va/decoder.hpp"

#include <cmath>

namespace m2va {

const std::string kPromptPrefix = "a video of ";

LabelSet make_label_set(const std::vector<std::string>& names, const Vocab& vocab,
                        idx max_len) {
    if (names.empty()) throw ConfigError("label set must not be empty");
    LabelSet ls;
    ls.names = names;
    for (const std::string& n : names)
        ls.prompts.push_back(tokenize(kPromptPrefix + n, vocab, max_len));
    return ls;
}

Tensor compute_label_embeddings(Model& m, LabelSet& labels) {
    std::vector<Tensor> rows;
    rows.reserve(labels.prompts.size());
    for (const TokenSequence& p : labels.prompts)
        rows.push_back(reshape(encode_text(m, p), {1, m.cfg.d_vl}));
    labels.embeddings = concat(0, rows);
    return labels.embeddings;
}

ContrastiveProbs contrastive_similarities(const Tensor& videos, const Tensor& texts,
                                          double tau) {
    if (tau <= 0.0) throw ConfigError("temperature must be positive");
    Tensor s = matmul_nt(l2_normalize_rows(videos), l2_normalize_rows(texts));
    ContrastiveProbs p;
    p.v2y = softmax_lastdim(scale(s, 1.0 / tau));
    p.y2v = softmax_lastdim(scale(permute(s, {1, 0}), 1.0 / tau));
    return p;
}

namespace {

// Normalizes raw 0/1 indicator rows to distributions (1/k over k positives).
Tensor normalize_gt_rows(const Tensor& gt) {
    idx B = gt.dim(0), C = gt.dim(1);
    Tensor out(gt.shape());
    for (idx i = 0; i < B; ++i) {
        double k = 0;
        for (idx j = 0; j < C; ++j) k += gt.at({i, j});
        if (k <= 0.0)
            throw ContractError("contrastive ground truth row " + std::to_string(i) +
                                " has no positive pair");
        for (idx j = 0; j < C; ++j)
            out.data()[size_t(i * C + j)] = gt.at({i, j}) / k;
    }
    return out;
}

double row_entropy_sum(const Tensor& gtn) {
    double h = 0.0;
    for (double v : gtn.data())
        if (v > 0.0) h += v * std::log(v);
    return h;  // sum of p log p, <= 0
}

}  // namespace

Tensor contrastive_kl_loss(const Tensor& logits_v2y, const Tensor& gt) {
    if (logits_v2y.shape() != gt.shape())
        throw ShapeError("contrastive loss: logits " + shape_str(logits_v2y.shape()) +
                         " vs ground truth " + shape_str(gt.shape()));
    idx B = logits_v2y.dim(0);
    Tensor gtn = normalize_gt_rows(gt);
    Tensor logp = log_softmax_lastdim(logits_v2y);
    Tensor cross = scale(sum_all(mul(gtn, logp)), -1.0 / static_cast<double>(B));
    return add_scalar(cross, row_entropy_sum(gtn) / static_cast<double>(B));
}

Tensor contrastive_loss(const Tensor& videos, const Tensor& texts, const Tensor& log_tau,
                        const std::vector<idx>& labels) {
    idx B = videos.dim(0);
    if (static_cast<idx>(labels.size()) != B)
        throw ContractError("contrastive loss: label count does not match batch size");
    Tensor gt(Shape{B, B});
    for (idx i = 0; i < B; ++i)
        for (idx j = 0; j < B; ++j)
            gt.data()[size_t(i * B + j)] =
                labels[size_t(i)] == labels[size_t(j)] ? 1.0 : 0.0;
    Tensor s = matmul_nt(l2_normalize_rows(videos), l2_normalize_rows(texts));
    Tensor logits = div(s, exp_t(log_tau));
    Tensor l1 = contrastive_kl_loss(logits, gt);
    Tensor l2 = contrastive_kl_loss(permute(logits, {1, 0}), gt);
    return scale(add(l1, l2), 0.5);
}

ZeroShotResult zero_shot_predict(const Tensor& v, const Tensor& label_embeddings,
                                 double tau) {
    if (tau <= 0.0) throw ConfigError("temperature must be positive");
    idx C = label_embeddings.dim(0);
    Tensor vn = l2_normalize_rows(reshape(v, {1, v.numel()}));
    Tensor s = matmul_nt(vn, l2_normalize_rows(label_embeddings));  // [1, C]
    Tensor probs = softmax_lastdim(scale(s, 1.0 / tau));
    ZeroShotResult r;
    r.probs = probs.data();
    r.cls = 0;
    for (idx i = 1; i < C; ++i)
        if (r.probs[size_t(i)] > r.probs[size_t(r.cls)]) r.cls = i;  // ties keep lowest
    return r;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<idx>& targets) {
    idx B = logits.dim(0), C = logits.dim(1);
    if (static_cast<idx>(targets.size()) != B)
        throw ContractError("cross_entropy: target count does not match batch size");
    std::vector<idx> flat;
    flat.reserve(targets.size());
    for (idx i = 0; i < B; ++i) {
        idx t = targets[size_t(i)];
        if (t < 0 || t >= C)
            throw ContractError("cross_entropy: target " + std::to_string(t) +
                                " out of range for " + std::to_string(C) + " classes");
        flat.push_back(i * C + t);
    }
    Tensor logp = log_softmax_lastdim(logits);
    return scale(sum_all(take(logp, flat)), -1.0 / static_cast<double>(B));
}

Tensor cmc_loss(const Tensor& videos, const Tensor& label_embeddings,
                const Tensor& log_tau, const std::vector<idx>& targets) {
    Tensor s = matmul_nt(l2_normalize_rows(videos), l2_normalize_rows(label_embeddings));
    Tensor logits = div(s, exp_t(log_tau));  // [B, C]
    return cross_entropy(logits, targets);
}

Tensor cmlm_forward(const Tensor& text_feats, const Tensor& frame_embeds,
                    const CMLMBlock& block, idx heads) {
    Tensor frames_l = matmul(frame_embeds, block.v2t);  // [T, d_l]
    Tensor qn = layer_norm(text_feats, block.layer.ln1_g, block.layer.ln1_b);
    Tensor kn = layer_norm(frames_l, block.layer.ln1_g, block.layer.ln1_b);
    Tensor wstar = add(text_feats, multi_head_attention(qn, kn, block.layer.attn, heads));
    Tensor what = text_adapter_forward(wstar, block.adapter);
    Tensor n2 = layer_norm(what, block.layer.ln2_g, block.layer.ln2_b);
    Tensor mid = gelu(add(matmul(n2, block.layer.ffn_w1), block.layer.ffn_b1));
    Tensor wm = add(what, add(matmul(mid, block.layer.ffn_w2), block.layer.ffn_b2));
    return add(matmul(wm, block.mlm_w), block.mlm_b);
}

Tensor cmlm_loss(const Tensor& logits, const std::vector<idx>& original_ids,
                 const std::vector<idx>& mask_positions) {
    if (mask_positions.empty()) return Tensor();
    idx N = logits.dim(0), V = logits.dim(1);
    std::vector<idx> flat;
    for (idx p : mask_positions) {
        if (p < 0 || p >= N || p >= static_cast<idx>(original_ids.size()))
            throw ContractError("cmlm_loss: masked position " + std::to_string(p) +
                                " out of range");
        flat.push_back(p * V + original_ids[size_t(p)]);
    }
    Tensor logp = log_softmax_lastdim(logits);
    return scale(sum_all(take(logp, flat)),
                 -1.0 / static_cast<double>(mask_positions.size()));
}

Tensor vc_logits(const Tensor& videos, const Decoder& dec) {
    if (!dec.vc_w.defined())
        throw ContractError("VC head was not constructed for this model");
    // linear probe: the VC loss trains only its own weights, so toggling the
    // head never perturbs the other heads' gradients
    return add(matmul(detach(videos), dec.vc_w), dec.vc_b);
}

Tensor aggregate_losses(const LossParts& parts, const HeadConfig& heads) {
    if (!heads.any_enabled())
        throw ConfigError("cannot aggregate losses with every head disabled");
    Tensor total;
    auto accumulate = [&](bool enabled, const Tensor& part, double weight) {
        if (!enabled || !part.defined()) return;
        Tensor term = scale(part, weight);
        total = total.defined() ? add(total, term) : term;
    };
    accumulate(heads.contrastive, parts.contrastive, heads.w_contrastive);
    accumulate(heads.cmc, parts.cmc, heads.w_cmc);
    accumulate(heads.cmlm, parts.cmlm, heads.w_cmlm);
    accumulate(heads.vc, parts.vc, heads.w_vc);
    return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace m2va
