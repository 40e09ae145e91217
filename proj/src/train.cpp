#include "m2va/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace m2va {

namespace {

struct AdamState {
    std::vector<std::vector<double>> m, v;
    idx t = 0;
};

void optimizer_step(std::vector<Parameter*>& params, const TrainConfig& cfg,
                    AdamState& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            size_t n = params[i]->tensor.data().size();
            state.m[i].assign(n, 0.0);
            state.v[i].assign(n, 0.0);
        }
    }
    ++state.t;
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i]->tensor;
        if (t.grad().empty()) continue;
        double lr = cfg.lr;
        if (params[i]->name.rfind("decoder.vc", 0) == 0) lr *= cfg.vc_lr_scale;
        double* w = t.data().data();
        const double* g = t.grad().data();
        if (cfg.optimizer == Optimizer::kSgd) {
            for (size_t j = 0; j < t.data().size(); ++j) w[j] -= lr * g[j];
            continue;
        }
        double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
        double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
        double* m = state.m[i].data();
        double* v = state.v[i].data();
        for (size_t j = 0; j < t.data().size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
        }
    }
}

void abort_on_non_finite(const Model& m, double loss) {
    if (std::isfinite(loss)) {
        for (const Parameter& p : m.params.all())
            if (!p.tensor.all_finite())
                throw ContractError("training aborted: parameter \"" + p.name +
                                    "\" became non-finite");
        return;
    }
    for (const Parameter& p : m.params.all())
        if (!p.tensor.all_finite())
            throw ContractError("training aborted: loss is non-finite; first "
                                "non-finite tensor is \"" + p.name + "\"");
    throw ContractError("training aborted: loss is non-finite (parameters are "
                        "finite; check the input batch)");
}

// Per-sample CMLM pass on a masked copy of the prompt.
Tensor cmlm_sample_loss(Model& m, const TokenSequence& seq,
                        const Tensor& frame_embeds, std::mt19937_64& rng,
                        double mask_ratio) {
    idx n_words = seq.eos_pos - 1;  // positions 1..eos-1 hold real words
    if (n_words < 1 || !m.decoder.cmlm) return Tensor();
    idx k = std::max<idx>(1, static_cast<idx>(std::floor(mask_ratio * double(n_words) + 0.5)));
    std::vector<idx> positions;
    for (idx p = 1; p <= n_words; ++p) positions.push_back(p);
    std::shuffle(positions.begin(), positions.end(), rng);
    positions.resize(static_cast<size_t>(std::min(k, n_words)));
    std::sort(positions.begin(), positions.end());

    TokenSequence masked = seq;
    masked.mask_positions = positions;
    for (idx p : positions) masked.ids[static_cast<size_t>(p)] = Vocab::kMask;
    Tensor feats = text_encoder_forward(masked, m.text, m.adapters, m.cfg);
    Tensor logits = cmlm_forward(feats, frame_embeds, *m.decoder.cmlm, m.cfg.heads_l);
    return cmlm_loss(logits, seq.ids, positions);
}

Tensor mean_of(const std::vector<Tensor>& parts) {
    if (parts.empty()) return Tensor();
    Tensor sum = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) sum = add(sum, parts[i]);
    return scale(sum, 1.0 / double(parts.size()));
}

}  // namespace

Model build_from_experiment(const ExperimentConfig& cfg, const SyntheticDataset& data) {
    cfg.validate();
    Vocab vocab = Vocab::build(data.corpus());
    return build_model(cfg.model, cfg.placement, cfg.heads, vocab,
                       static_cast<idx>(data.train_classes.size()), cfg.train.seed);
}

MetricsReport train(Model& m, const SyntheticDataset& data, const TrainConfig& cfg,
                    std::ostream* log) {
    cfg.validate(m.heads.contrastive);
    MetricsReport report;
    std::vector<Parameter*> trainables = m.params.trainable();
    AdamState opt;
    std::mt19937_64 rng(cfg.seed ^ 0x7261696e64ull);

    std::vector<TokenSequence> class_prompts;
    for (const std::string& name : data.train_classes)
        class_prompts.push_back(
            tokenize(kPromptPrefix + name, m.vocab, m.cfg.max_text_len));
    LabelSet labels = make_label_set(data.train_classes, m.vocab, m.cfg.max_text_len);

    if (log) *log << MetricsReport::tsv_header();

    idx n = static_cast<idx>(data.train.clips.size());
    std::vector<idx> order(static_cast<size_t>(n));
    for (idx i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (idx epoch = 1; epoch <= cfg.epochs; ++epoch) {
        TrainConfig step_cfg = cfg;
        if (cfg.schedule == LrSchedule::kCosine)
            step_cfg.lr = cfg.lr * 0.5 *
                          (1.0 + std::cos(3.14159265358979323846 * double(epoch - 1) /
                                          double(cfg.epochs)));
        std::shuffle(order.begin(), order.end(), rng);
        double ep_total = 0, ep_con = 0, ep_cmc = 0, ep_cmlm = 0, ep_vc = 0;
        idx steps = 0;
        for (idx start = 0; start + cfg.batch_size <= n; start += cfg.batch_size) {
            m.params.zero_grads();
            Tape tape;
            std::vector<Tensor> vrows, trows;
            std::vector<Tensor> frame_embeds;
            std::vector<idx> batch_labels;
            for (idx b = 0; b < cfg.batch_size; ++b) {
                idx i = order[static_cast<size_t>(start + b)];
                idx cls = data.train.labels[static_cast<size_t>(i)];
                batch_labels.push_back(cls);
                VideoEmbedding ve =
                    encode_video(m, data.train.clips[static_cast<size_t>(i)]);
                vrows.push_back(reshape(ve.pooled, {1, m.cfg.d_vl}));
                frame_embeds.push_back(ve.frame_embeds);
                trows.push_back(reshape(
                    encode_text(m, class_prompts[static_cast<size_t>(cls)]),
                    {1, m.cfg.d_vl}));
            }
            Tensor videos = concat(0, vrows);
            Tensor texts = concat(0, trows);

            LossParts parts;
            if (m.heads.contrastive)
                parts.contrastive =
                    contrastive_loss(videos, texts, m.decoder.log_tau, batch_labels);
            if (m.heads.cmc) {
                compute_label_embeddings(m, labels);
                parts.cmc =
                    cmc_loss(videos, labels.embeddings, m.decoder.log_tau, batch_labels);
            }
            if (m.heads.vc)
                parts.vc = cross_entropy(vc_logits(videos, m.decoder), batch_labels);
            if (m.heads.cmlm) {
                std::vector<Tensor> cl;
                for (idx b = 0; b < cfg.batch_size; ++b) {
                    Tensor l = cmlm_sample_loss(
                        m, class_prompts[static_cast<size_t>(batch_labels[size_t(b)])],
                        frame_embeds[static_cast<size_t>(b)], rng, cfg.mask_ratio);
                    if (l.defined()) cl.push_back(l);
                }
                parts.cmlm = mean_of(cl);
            }
            Tensor total = aggregate_losses(parts, m.heads);
            abort_on_non_finite(m, total.item());
            tape.backward(total);
            optimizer_step(trainables, step_cfg, opt);
            clamp_temperature(m);

            ep_total += total.item();
            if (parts.contrastive.defined()) ep_con += parts.contrastive.item();
            if (parts.cmc.defined()) ep_cmc += parts.cmc.item();
            if (parts.cmlm.defined()) ep_cmlm += parts.cmlm.item();
            if (parts.vc.defined()) ep_vc += parts.vc.item();
            ++steps;
        }

        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            MetricsRow row;
            row.epoch = epoch;
            double d = std::max<idx>(steps, 1);
            row.loss_total = ep_total / d;
            row.loss_contrastive = ep_con / d;
            row.loss_cmc = ep_cmc / d;
            row.loss_cmlm = ep_cmlm / d;
            row.loss_vc = ep_vc / d;
            if (m.heads.vc) {
                EvalResult vc = evaluate_supervised(m, data.val, data.train_classes,
                                                    SupPath::kVcHead);
                row.vc_top1 = vc.top1;
                row.vc_top5 = vc.top5;
            }
            EvalResult cmc = evaluate_supervised(m, data.val, data.train_classes,
                                                 SupPath::kCmcSimilarity);
            row.cmc_top1 = cmc.top1;
            row.cmc_top5 = cmc.top5;
            row.zeroshot_top1 = evaluate_zero_shot(m, data.holdout, data.holdout_classes,
                                                   data.train_classes);
            row.trainable = m.params.count_trainable();
            row.frozen = m.params.count_frozen();
            report.rows.push_back(row);
            if (log) *log << MetricsReport::tsv_line(row) << std::flush;
        }
    }
    return report;
}

namespace {

// Scores one clip against every class via the requested path.
std::vector<double> class_scores(Model& m, const VideoClip& clip,
                                 const Tensor& label_embeddings, SupPath path) {
    VideoEmbedding ve = encode_video(m, clip);
    idx C = path == SupPath::kVcHead ? m.decoder.vc_w.dim(1) : label_embeddings.dim(0);
    std::vector<double> scores(static_cast<size_t>(C));
    if (path == SupPath::kVcHead) {
        Tensor logits = vc_logits(reshape(ve.pooled, {1, m.cfg.d_vl}), m.decoder);
        scores = logits.data();
    } else {
        ZeroShotResult r =
            zero_shot_predict(ve.pooled, label_embeddings, m.decoder.tau());
        scores = r.probs;
    }
    return scores;
}

idx rank_of(const std::vector<double>& scores, idx target) {
    // ties resolve toward lower indices, matching zero_shot_predict
    idx better = 0;
    for (idx j = 0; j < static_cast<idx>(scores.size()); ++j) {
        if (j == target) continue;
        double a = scores[static_cast<size_t>(j)], b = scores[static_cast<size_t>(target)];
        if (a > b || (a == b && j < target)) ++better;
    }
    return better;  // 0 == top-1
}

}  // namespace

EvalResult evaluate_supervised(Model& m, const SplitData& split,
                               const std::vector<std::string>& class_names,
                               SupPath path) {
    LabelSet labels = make_label_set(class_names, m.vocab, m.cfg.max_text_len);
    if (path == SupPath::kCmcSimilarity) compute_label_embeddings(m, labels);
    idx hit1 = 0, hit5 = 0;
    for (size_t i = 0; i < split.clips.size(); ++i) {
        std::vector<double> scores =
            class_scores(m, split.clips[i], labels.embeddings, path);
        idx r = rank_of(scores, split.labels[i]);
        hit1 += r == 0;
        hit5 += r < 5;
    }
    double n = std::max<size_t>(split.clips.size(), 1);
    return {double(hit1) / n, double(hit5) / n};
}

std::vector<double> per_class_accuracy(Model& m, const SplitData& split,
                                       const std::vector<std::string>& class_names,
                                       SupPath path) {
    LabelSet labels = make_label_set(class_names, m.vocab, m.cfg.max_text_len);
    if (path == SupPath::kCmcSimilarity) compute_label_embeddings(m, labels);
    std::vector<double> hits(class_names.size(), 0), totals(class_names.size(), 0);
    for (size_t i = 0; i < split.clips.size(); ++i) {
        std::vector<double> scores =
            class_scores(m, split.clips[i], labels.embeddings, path);
        size_t cls = static_cast<size_t>(split.labels[i]);
        totals[cls] += 1;
        hits[cls] += rank_of(scores, split.labels[i]) == 0;
    }
    std::vector<double> acc(class_names.size(), 0);
    for (size_t c = 0; c < acc.size(); ++c)
        if (totals[c] > 0) acc[c] = hits[c] / totals[c];
    return acc;
}

double evaluate_zero_shot(Model& m, const SplitData& holdout,
                          const std::vector<std::string>& holdout_names,
                          const std::vector<std::string>& train_names) {
    std::set<std::string> seen(train_names.begin(), train_names.end());
    for (const std::string& h : holdout_names)
        if (seen.count(h))
            throw ContractError("zero-shot class \"" + h +
                                "\" also appears in the training classes");
    LabelSet labels = make_label_set(holdout_names, m.vocab, m.cfg.max_text_len);
    compute_label_embeddings(m, labels);
    idx hits = 0;
    for (size_t i = 0; i < holdout.clips.size(); ++i) {
        VideoEmbedding ve = encode_video(m, holdout.clips[i]);
        ZeroShotResult r =
            zero_shot_predict(ve.pooled, labels.embeddings, m.decoder.tau());
        hits += r.cls == holdout.labels[i];
    }
    return double(hits) / double(std::max<size_t>(holdout.clips.size(), 1));
}

double cmlm_word_accuracy(Model& m, const SyntheticDataset& data) {
    if (!m.decoder.cmlm) throw ContractError("model has no CMLM block");
    idx hits = 0, total = 0;
    for (size_t c = 0; c < data.train_classes.size(); ++c) {
        // one deterministic clip per class provides the visual context
        const VideoClip* clip = nullptr;
        for (size_t i = 0; i < data.val.clips.size(); ++i)
            if (data.val.labels[i] == static_cast<idx>(c)) {
                clip = &data.val.clips[i];
                break;
            }
        if (!clip) continue;
        VideoEmbedding ve = encode_video(m, *clip);
        TokenSequence seq = tokenize(kPromptPrefix + data.train_classes[c], m.vocab,
                                     m.cfg.max_text_len);
        for (idx p = 1; p < seq.eos_pos; ++p) {
            TokenSequence masked = seq;
            masked.ids[static_cast<size_t>(p)] = Vocab::kMask;
            masked.mask_positions = {p};
            Tensor feats = text_encoder_forward(masked, m.text, m.adapters, m.cfg);
            Tensor logits =
                cmlm_forward(feats, ve.frame_embeds, *m.decoder.cmlm, m.cfg.heads_l);
            idx best = 0;
            for (idx v = 1; v < m.vocab.size(); ++v)
                if (logits.at({p, v}) > logits.at({p, best})) best = v;
            hits += best == seq.ids[static_cast<size_t>(p)];
            ++total;
        }
    }
    return total ? double(hits) / double(total) : 0.0;
}

std::string MetricsReport::tsv_header() {
    return "epoch\tloss_total\tloss_contrastive\tloss_cmc\tloss_cmlm\tloss_vc\t"
           "vc_top1\tvc_top5\tcmc_top1\tcmc_top5\tzeroshot_top1\t"
           "trainable_params\tfrozen_params\n";
}

std::string MetricsReport::tsv_line(const MetricsRow& r) {
    std::ostringstream os;
    os << r.epoch;
    os << std::setprecision(6) << std::fixed;
    for (double v : {r.loss_total, r.loss_contrastive, r.loss_cmc, r.loss_cmlm,
                     r.loss_vc, r.vc_top1, r.vc_top5, r.cmc_top1, r.cmc_top5,
                     r.zeroshot_top1})
        os << "\t" << v;
    os << "\t" << r.trainable << "\t" << r.frozen << "\n";
    return os.str();
}

std::string MetricsReport::to_tsv() const {
    std::string out = tsv_header();
    for (const MetricsRow& r : rows) out += tsv_line(r);
    return out;
}

std::string params_table(const ParamRegistry& params) {
    std::ostringstream os;
    os << "module\ttrainable\tfrozen\n";
    auto t = params.breakdown(true);
    auto all = params.breakdown(false);
    for (const auto& [prefix, n] : all) {
        idx tr = t.count(prefix) ? t.at(prefix) : 0;
        os << prefix << "\t" << tr << "\t" << (n - tr) << "\n";
    }
    os << "total\t" << params.count_trainable() << "\t" << params.count_frozen()
       << "\n";
    return os.str();
}

}  // namespace m2va
