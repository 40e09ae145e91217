#pragma once

#include <optional>

#include "m2va/model.hpp"

namespace m2va {

struct LabelSet {
    std::vector<std::string> names;        // ordered, stable across a run
    std::vector<TokenSequence> prompts;    // tokenized "a video of <name>"
    Tensor embeddings;                     // [C, d_vl], recomputed per step

    idx size() const { return static_cast<idx>(names.size()); }
};

extern const std::string kPromptPrefix;  // "a video of "

LabelSet make_label_set(const std::vector<std::string>& names, const Vocab& vocab,
                        idx max_len);
// Runs the current text tower over every prompt and caches the result.
Tensor compute_label_embeddings(Model& m, LabelSet& labels);

// Eq-10 style symmetric batch similarities, softmax-normalized per row.
struct ContrastiveProbs {
    Tensor v2y;  // [B, B]
    Tensor y2v;  // [B, B]
};
ContrastiveProbs contrastive_similarities(const Tensor& videos, const Tensor& texts,
                                          double tau);

// KL(ground truth || prediction), averaged over rows and both directions.
// gt holds raw 0/1 pair indicators; rows are normalized to 1/k over the k
// positives. A row without any positive is a contract error.
Tensor contrastive_kl_loss(const Tensor& logits_v2y, const Tensor& gt);
// Convenience wrapper building gt from batch class labels (multi-positive
// aware) and applying the trainable temperature.
Tensor contrastive_loss(const Tensor& videos, const Tensor& texts, const Tensor& log_tau,
                        const std::vector<idx>& labels);

struct ZeroShotResult {
    idx cls = -1;
    std::vector<double> probs;
};
ZeroShotResult zero_shot_predict(const Tensor& v, const Tensor& label_embeddings,
                                 double tau);

Tensor cmc_loss(const Tensor& videos, const Tensor& label_embeddings,
                const Tensor& log_tau, const std::vector<idx>& targets);

// Cross-modal MLM block: text features cross-attend to per-frame video
// embeddings, pass through the trainable adapter and the frozen FFN, then
// project to vocabulary logits.
Tensor cmlm_forward(const Tensor& text_feats, const Tensor& frame_embeds,
                    const CMLMBlock& block, idx heads);
// Mean cross-entropy over masked positions; undefined Tensor when none masked.
Tensor cmlm_loss(const Tensor& logits, const std::vector<idx>& original_ids,
                 const std::vector<idx>& mask_positions);

Tensor vc_logits(const Tensor& videos, const Decoder& dec);
Tensor cross_entropy(const Tensor& logits, const std::vector<idx>& targets);

struct LossParts {
    Tensor contrastive, cmc, cmlm, vc;  // undefined when head disabled/absent
};
// Weighted sum over enabled heads; disabled heads contribute neither value
// nor gradient. All heads disabled is a configuration error.
Tensor aggregate_losses(const LossParts& parts, const HeadConfig& heads);

}  // namespace m2va
