#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "m2va/decoder.hpp"
#include "m2va/gradcheck.hpp"

using namespace m2va;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig c;
    c.video_layers = 2;
    c.text_layers = 2;
    c.d_v = 8;
    c.d_l = 8;
    c.d_vl = 4;
    c.patch = 4;
    c.image = 8;
    c.frames = 2;
    c.heads_v = 2;
    c.heads_l = 2;
    c.max_text_len = 8;
    return c;
}

Vocab tiny_vocab() {
    return Vocab::build({kPromptPrefix + "red square", kPromptPrefix + "blue circle"});
}

Model tiny_model(std::uint64_t seed = 7, HeadConfig heads = HeadConfig{}) {
    EncoderConfig cfg = tiny_cfg();
    Vocab vocab = tiny_vocab();
    return build_model(cfg, AdapterPlacement::defaults(cfg.video_layers, cfg.text_layers),
                       heads, vocab, 2, seed);
}

void randomize_trainables(Model& m, std::uint64_t seed, double stddev = 0.05) {
    RandomSource rng(seed);
    for (Parameter* p : m.params.trainable())
        for (double& v : p->tensor.data()) v = rng.normal(stddev);
    m.decoder.log_tau.data()[0] = std::log(kTauInit);
}

}  // namespace

TEST_CASE("contrastive similarities basic shapes and oracle") {
    Tensor v1(Shape{1, 3}, {1, 0, 0});
    ContrastiveProbs p1 = contrastive_similarities(v1, v1, 0.07);
    CHECK(p1.v2y.item() == 1.0);
    CHECK(p1.y2v.item() == 1.0);

    // orthonormal matched pairs, small temperature -> near identity
    Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    ContrastiveProbs pi = contrastive_similarities(eye, eye, 0.01);
    for (idx i = 0; i < 3; ++i)
        for (idx j = 0; j < 3; ++j)
            CHECK(pi.v2y.at({i, j}) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));

    RandomSource rng(3);
    Tensor v = rng.randn({3, 4}, 1.0), w = rng.randn({3, 4}, 1.0);
    double tau = 0.2;
    ContrastiveProbs p = contrastive_similarities(v, w, tau);
    for (idx i = 0; i < 3; ++i) {
        double rs = 0;
        for (idx j = 0; j < 3; ++j) rs += p.v2y.at({i, j});
        CHECK(std::fabs(rs - 1.0) < 1e-12);
        // direct exp/sum oracle over raw cosines
        double z = 0;
        std::vector<double> e(3);
        for (idx j = 0; j < 3; ++j) {
            Tensor cs = cosine_similarity(reshape(slice(v, 0, i, 1), {4}),
                                          reshape(slice(w, 0, j, 1), {4}));
            e[size_t(j)] = std::exp(cs.item() / tau);
            z += e[size_t(j)];
        }
        for (idx j = 0; j < 3; ++j)
            CHECK(p.v2y.at({i, j}) == doctest::Approx(e[size_t(j)] / z).epsilon(1e-10));
    }
    CHECK_THROWS_AS(contrastive_similarities(v, w, 0.0), ConfigError);
}

TEST_CASE("contrastive KL loss values") {
    // matched distributions give exactly zero-ish loss
    Tensor gt2(Shape{2, 2}, {1, 0, 0, 1});
    Tensor sharp(Shape{2, 2}, {40, 0, 0, 40});
    CHECK(contrastive_kl_loss(sharp, gt2).item() == doctest::Approx(0.0).epsilon(1e-12));

    // uniform predictions vs one-hot rows -> ln 2
    Tensor uniform(Shape{2, 2}, 0.0);
    CHECK(contrastive_kl_loss(uniform, gt2).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // duplicated label: rows 0 and 1 share a class -> 1/2 on each positive
    Tensor gt3(Shape{3, 3}, {1, 1, 0, 1, 1, 0, 0, 0, 1});
    RandomSource rng(4);
    Tensor logits = rng.randn({3, 3}, 1.0);
    double manual = 0;
    for (idx i = 0; i < 3; ++i) {
        double z = 0;
        for (idx j = 0; j < 3; ++j) z += std::exp(logits.at({i, j}));
        for (idx j = 0; j < 3; ++j) {
            double g = gt3.at({i, j}) / (i == 2 ? 1.0 : 2.0);
            if (g > 0)
                manual += g * (std::log(g) -
                               (logits.at({i, j}) - std::log(z)));
        }
    }
    CHECK(contrastive_kl_loss(logits, gt3).item() ==
          doctest::Approx(manual / 3.0).epsilon(1e-12));

    Tensor empty_row(Shape{2, 2}, {1, 0, 0, 0});
    CHECK_THROWS_AS(contrastive_kl_loss(logits, gt2), ShapeError);
    CHECK_THROWS_AS(contrastive_kl_loss(Tensor(Shape{2, 2}, 0.0), empty_row),
                    ContractError);
}

TEST_CASE("contrastive loss wrapper handles multi-positive batches") {
    RandomSource rng(5);
    Tensor v = rng.randn({3, 4}, 1.0), w = rng.randn({3, 4}, 1.0);
    Tensor log_tau = Tensor::scalar(std::log(0.5));
    Tensor loss = contrastive_loss(v, w, log_tau, {0, 0, 1});
    CHECK(loss.item() > 0.0);
    // identical embeddings with unique labels: loss falls as tau shrinks
    Tensor eye(Shape{3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0});
    double warm = contrastive_loss(eye, eye, Tensor::scalar(std::log(0.5)), {0, 1, 2}).item();
    double cold = contrastive_loss(eye, eye, Tensor::scalar(std::log(0.05)), {0, 1, 2}).item();
    CHECK(cold < warm);
    CHECK(cold == doctest::Approx(0.0).epsilon(1e-6));
    CHECK_THROWS_AS(contrastive_loss(v, w, log_tau, {0, 1}), ContractError);
}

TEST_CASE("zero-shot prediction") {
    Tensor one(Shape{1, 3}, {0.5, 0, 0});
    ZeroShotResult r1 = zero_shot_predict(Tensor(Shape{3}, {1, 0, 0}), one, 0.07);
    CHECK(r1.cls == 0);
    CHECK(r1.probs == std::vector<double>{1.0});

    Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor v(Shape{3}, {0, 0, 2.5});  // aligned with class 2, any norm
    for (double tau : {0.01, 0.07, 1.0, 10.0})
        CHECK(zero_shot_predict(v, eye, tau).cls == 2);

    // exact tie between classes 0 and 2 -> lowest index wins
    Tensor tied(Shape{3}, {1, 0, 1});
    CHECK(zero_shot_predict(tied, eye, 0.07).cls == 0);
}

TEST_CASE("cmc loss analytic values") {
    Tensor labels(Shape{2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor v(Shape{1, 3}, {1, 0, 0});
    Tensor log_tau = Tensor::scalar(0.0);  // tau = 1
    double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(cmc_loss(v, labels, log_tau, {0}).item() ==
          doctest::Approx(expect).epsilon(1e-6));

    // uniform similarities -> ln C, and the logits matrix is B x C with B < C
    Tensor same(Shape{2, 3}, {1, 0, 0, 1, 0, 0});
    Tensor vb(Shape{1, 3}, {0, 0, 1});  // orthogonal to every label
    CHECK(cmc_loss(vb, Tensor(Shape{4, 3}, {1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0}),
                   log_tau, {3})
              .item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    CHECK_THROWS_AS(cmc_loss(v, labels, log_tau, {5}), ContractError);
}

TEST_CASE("cmlm block construction freezes copies of the final text layer") {
    Model m = tiny_model();
    REQUIRE(m.decoder.cmlm.has_value());
    const CMLMBlock& blk = *m.decoder.cmlm;
    const TransformerLayerWeights& src = m.text.layers.back();
    CHECK(blk.layer.attn.wq.data() == src.attn.wq.data());
    CHECK(blk.layer.ffn_w1.data() == src.ffn_w1.data());
    CHECK(blk.layer.ln2_g.data() == src.ln2_g.data());
    CHECK_FALSE(m.params.at("decoder.cmlm.layer.attn.wq").trainable);
    CHECK_FALSE(m.params.at("decoder.cmlm.v2t").trainable);
    CHECK(m.params.at("decoder.cmlm.adapter.w_dn").trainable);
    CHECK(m.params.at("decoder.cmlm.mlm.w").trainable);
}

TEST_CASE("cmlm forward degenerate path reduces to the frozen ffn residual") {
    Model m = tiny_model();
    CMLMBlock& blk = *m.decoder.cmlm;
    // kill the attention contribution; the fresh adapter is already identity
    for (double& v : blk.layer.attn.wo.data()) v = 0.0;
    for (double& v : blk.layer.attn.bo.data()) v = 0.0;

    RandomSource rng(6);
    Tensor z = rng.randn({4, m.cfg.d_l}, 1.0);
    Tensor frames = rng.randn({m.cfg.frames, m.cfg.d_vl}, 1.0);
    Tensor logits = cmlm_forward(z, frames, blk, m.cfg.heads_l);
    REQUIRE(logits.shape() == Shape{4, m.vocab.size()});

    Tensor n2 = layer_norm(z, blk.layer.ln2_g, blk.layer.ln2_b);
    Tensor mid = gelu(add(matmul(n2, blk.layer.ffn_w1), blk.layer.ffn_b1));
    Tensor wm = add(z, add(matmul(mid, blk.layer.ffn_w2), blk.layer.ffn_b2));
    Tensor expect = add(matmul(wm, blk.mlm_w), blk.mlm_b);
    for (size_t i = 0; i < logits.data().size(); ++i)
        CHECK(logits.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("cmlm gradients vs finite differences") {
    Model m = tiny_model();
    randomize_trainables(m, 8);
    RandomSource rng(9);
    Tensor z = rng.randn({4, m.cfg.d_l}, 1.0);
    Tensor frames = rng.randn({m.cfg.frames, m.cfg.d_vl}, 1.0);

    // isolate the block: only its adapter and projection are trainable here
    ParamRegistry sub;
    CMLMBlock& blk = *m.decoder.cmlm;
    blk.adapter.w_dn = sub.create("a.w_dn", blk.adapter.w_dn, true);
    blk.adapter.b_dn = sub.create("a.b_dn", blk.adapter.b_dn, true);
    blk.adapter.w_up = sub.create("a.w_up", blk.adapter.w_up, true);
    blk.adapter.b_up = sub.create("a.b_up", blk.adapter.b_up, true);
    blk.mlm_w = sub.create("mlm.w", blk.mlm_w, true);

    auto f = [&]() {
        Tensor logits = cmlm_forward(z, frames, blk, m.cfg.heads_l);
        return cmlm_loss(logits, {2, 5, 6, 2}, {1, 2});
    };
    GradCheckReport rep = finite_difference_check(f, sub, 1e-5, 1e-4);
    CHECK(rep.all_ok);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("cmlm loss values") {
    idx V = 6;
    Tensor onehot(Shape{3, V}, 0.0);
    std::vector<idx> ids = {2, 4, 1};
    for (idx p = 0; p < 3; ++p)
        onehot.data()[size_t(p * V + ids[size_t(p)])] = 50.0;
    CHECK(cmlm_loss(onehot, ids, {0, 1, 2}).item() ==
          doctest::Approx(0.0).epsilon(1e-12));

    Tensor uniform(Shape{3, V}, 0.0);
    CHECK(cmlm_loss(uniform, ids, {1}).item() ==
          doctest::Approx(std::log(double(V))).epsilon(1e-12));

    CHECK_FALSE(cmlm_loss(uniform, ids, {}).defined());
    CHECK_THROWS_AS(cmlm_loss(uniform, ids, {7}), ContractError);
}

TEST_CASE("vc head loss values and gradients") {
    Model m = tiny_model();
    RandomSource rng(10);
    Tensor v = rng.randn({2, m.cfg.d_vl}, 1.0);
    // zero weights and bias -> uniform softmax -> ln C
    Tensor logits = vc_logits(v, m.decoder);
    CHECK(cross_entropy(logits, {0, 1}).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // bias strongly favoring the target class -> loss near 0
    m.decoder.vc_b.data() = {30.0, 0.0};
    CHECK(cross_entropy(vc_logits(v, m.decoder), {0, 0}).item() ==
          doctest::Approx(0.0).epsilon(1e-10));
    m.decoder.vc_b.data() = {0.0, 0.0};

    ParamRegistry sub;
    m.decoder.vc_w = sub.create("vc.w", m.decoder.vc_w, true);
    m.decoder.vc_b = sub.create("vc.b", m.decoder.vc_b, true);
    randomize_trainables(m, 11);
    auto f = [&]() { return cross_entropy(vc_logits(v, m.decoder), {0, 1}); };
    GradCheckReport rep = finite_difference_check(f, sub, 1e-5, 1e-6);
    CHECK(rep.all_ok);
    CHECK(rep.max_rel_err < 1e-6);

    CHECK_THROWS_AS(cross_entropy(logits, {0, 2}), ContractError);
    HeadConfig no_vc;
    no_vc.vc = false;
    Model m2 = tiny_model(7, no_vc);
    CHECK_THROWS_AS(vc_logits(v, m2.decoder), ContractError);
}

TEST_CASE("loss aggregation") {
    LossParts parts;
    parts.contrastive = Tensor::scalar(0.5);
    parts.cmc = Tensor::scalar(0.25);
    parts.cmlm = Tensor::scalar(1.5);
    parts.vc = Tensor::scalar(2.0);

    HeadConfig only_con;
    only_con.cmc = only_con.cmlm = only_con.vc = false;
    CHECK(aggregate_losses(parts, only_con).item() == 0.5);

    HeadConfig all;
    CHECK(aggregate_losses(parts, all).item() == doctest::Approx(4.25).epsilon(1e-15));

    all.w_cmc = 2.0;
    CHECK(aggregate_losses(parts, all).item() == doctest::Approx(4.5).epsilon(1e-15));

    // absent cmlm contributes nothing
    parts.cmlm = Tensor();
    all.w_cmc = 1.0;
    CHECK(aggregate_losses(parts, all).item() == doctest::Approx(2.75).epsilon(1e-15));

    HeadConfig none;
    none.contrastive = none.cmc = none.cmlm = none.vc = false;
    CHECK_THROWS_AS(aggregate_losses(parts, none), ConfigError);
}

namespace {

// One full multi-task forward pass over a fixed 2-clip batch.
LossParts full_forward(Model& m, const std::vector<VideoClip>& clips,
                       const std::vector<TokenSequence>& seqs,
                       const std::vector<idx>& classes, LabelSet& labels) {
    std::vector<Tensor> vrows, trows;
    std::vector<Tensor> frame_embeds;
    for (size_t i = 0; i < clips.size(); ++i) {
        VideoEmbedding ve = encode_video(m, clips[i]);
        vrows.push_back(reshape(ve.pooled, {1, m.cfg.d_vl}));
        frame_embeds.push_back(ve.frame_embeds);
        trows.push_back(reshape(encode_text(m, seqs[i]), {1, m.cfg.d_vl}));
    }
    Tensor videos = concat(0, vrows), texts = concat(0, trows);
    compute_label_embeddings(m, labels);

    LossParts parts;
    if (m.heads.contrastive)
        parts.contrastive = contrastive_loss(videos, texts, m.decoder.log_tau, classes);
    if (m.heads.cmc)
        parts.cmc = cmc_loss(videos, labels.embeddings, m.decoder.log_tau, classes);
    if (m.heads.vc) parts.vc = cross_entropy(vc_logits(videos, m.decoder), classes);
    if (m.heads.cmlm) {
        TokenSequence masked = seqs[0];
        masked.mask_positions = {2};
        std::vector<idx> orig = masked.ids;
        masked.ids[2] = Vocab::kMask;
        Tensor feats = text_encoder_forward(masked, m.text, m.adapters, m.cfg);
        Tensor logits = cmlm_forward(feats, frame_embeds[0], *m.decoder.cmlm,
                                     m.cfg.heads_l);
        parts.cmlm = cmlm_loss(logits, orig, masked.mask_positions);
    }
    return parts;
}

std::map<std::string, std::vector<double>> grads_of(Model& m, HeadConfig heads) {
    m.heads = heads;
    RandomSource rng(77);
    std::vector<VideoClip> clips = {
        {rng.randn({m.cfg.frames, m.cfg.image, m.cfg.image, 3}, 1.0)},
        {rng.randn({m.cfg.frames, m.cfg.image, m.cfg.image, 3}, 1.0)}};
    std::vector<TokenSequence> seqs = {
        tokenize("red square", m.vocab, m.cfg.max_text_len),
        tokenize("blue circle", m.vocab, m.cfg.max_text_len)};
    LabelSet labels = make_label_set({"red square", "blue circle"}, m.vocab,
                                     m.cfg.max_text_len);
    m.params.zero_grads();
    {
        Tape tape;
        LossParts parts = full_forward(m, clips, seqs, {0, 1}, labels);
        tape.backward(aggregate_losses(parts, m.heads));
    }
    std::map<std::string, std::vector<double>> out;
    for (Parameter* p : m.params.trainable()) {
        std::vector<double> g = p->tensor.grad();
        if (g.empty()) g.assign(p->tensor.data().size(), 0.0);  // never touched
        out[p->name] = g;
    }
    return out;
}

}  // namespace

TEST_CASE("disabling the vc head zeroes only vc gradients") {
    Model m = tiny_model(13);
    randomize_trainables(m, 14);
    auto with_vc = grads_of(m, HeadConfig{});
    HeadConfig no_vc;
    no_vc.vc = false;
    auto without_vc = grads_of(m, no_vc);

    for (const auto& [name, g] : with_vc) {
        if (name.rfind("decoder.vc.", 0) == 0) {
            bool any = false;
            for (double v : without_vc.at(name)) any = any || v != 0.0;
            CHECK_FALSE(any);
        } else {
            CHECK(g == without_vc.at(name));
        }
    }
}

TEST_CASE("total gradient equals the weighted per-head sum") {
    Model m = tiny_model(15);
    randomize_trainables(m, 16);
    HeadConfig all;
    all.w_contrastive = 1.0;
    all.w_cmc = 0.5;
    all.w_cmlm = 2.0;
    all.w_vc = 0.25;
    auto total = grads_of(m, all);

    std::map<std::string, std::vector<double>> acc;
    std::vector<HeadConfig> singles(4);
    for (auto& h : singles) h.contrastive = h.cmc = h.cmlm = h.vc = false;
    singles[0].contrastive = true;
    singles[0].w_contrastive = all.w_contrastive;
    singles[1].cmc = true;
    singles[1].w_cmc = all.w_cmc;
    singles[2].cmlm = true;
    singles[2].w_cmlm = all.w_cmlm;
    singles[3].vc = true;
    singles[3].w_vc = all.w_vc;
    for (const HeadConfig& h : singles) {
        auto g = grads_of(m, h);
        for (const auto& [name, vec] : g) {
            auto& dst = acc[name];
            if (dst.empty()) dst.assign(vec.size(), 0.0);
            for (size_t i = 0; i < vec.size(); ++i) dst[i] += vec[i];
        }
    }
    for (const auto& [name, vec] : total) {
        const auto& sum = acc.at(name);
        for (size_t i = 0; i < vec.size(); ++i)
            CHECK(vec[i] == doctest::Approx(sum[i]).epsilon(1e-9));
    }
}

TEST_CASE("full model contrastive gradients vs finite differences") {
    EncoderConfig cfg = tiny_cfg();
    cfg.video_layers = 1;
    cfg.text_layers = 1;
    Vocab vocab = tiny_vocab();
    HeadConfig heads;
    heads.cmc = heads.cmlm = heads.vc = false;
    Model m = build_model(cfg, AdapterPlacement::defaults(1, 1), heads, vocab, 2, 17);
    randomize_trainables(m, 18);

    RandomSource rng(19);
    std::vector<VideoClip> clips = {
        {rng.randn({cfg.frames, cfg.image, cfg.image, 3}, 1.0)},
        {rng.randn({cfg.frames, cfg.image, cfg.image, 3}, 1.0)}};
    std::vector<TokenSequence> seqs = {
        tokenize("red square", vocab, cfg.max_text_len),
        tokenize("blue circle", vocab, cfg.max_text_len)};

    auto f = [&]() {
        std::vector<Tensor> vr, tr;
        for (size_t i = 0; i < clips.size(); ++i) {
            vr.push_back(reshape(encode_video(m, clips[i]).pooled, {1, cfg.d_vl}));
            tr.push_back(reshape(encode_text(m, seqs[i]), {1, cfg.d_vl}));
        }
        return contrastive_loss(concat(0, vr), concat(0, tr), m.decoder.log_tau, {0, 1});
    };
    GradCheckReport rep = finite_difference_check(f, m.params, 1e-5, 1e-4);
    INFO(format_report(rep));
    CHECK(rep.all_ok);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("label set plumbing") {
    Vocab vocab = tiny_vocab();
    LabelSet ls = make_label_set({"red square", "blue circle"}, vocab, 8);
    CHECK(ls.size() == 2);
    CHECK(detokenize(ls.prompts[0], vocab) == "a video of red square");
    CHECK_THROWS_AS(make_label_set({}, vocab, 8), ConfigError);

    Model m = tiny_model();
    Tensor emb = compute_label_embeddings(m, ls);
    REQUIRE(emb.shape() == Shape{2, m.cfg.d_vl});
    CHECK(emb.all_finite());
    // matches encoding the prompt directly
    Tensor w = encode_text(m, ls.prompts[1]);
    for (idx i = 0; i < m.cfg.d_vl; ++i)
        CHECK(emb.at({1, i}) == w.data()[size_t(i)]);
}
