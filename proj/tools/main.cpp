#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "m2va/ablation.hpp"
#include "m2va/checkpoint.hpp"
#include "m2va/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace m2va;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "run";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file");
    cmd->add_option("--set", args.overrides,
                    "config override key=value (repeatable, applied after the file)");
    cmd->add_option("--out", args.out_dir, "output directory for reports");
}

ExperimentConfig resolve_config(const CommonArgs& args) {
    ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = load_config_file(args.config_path, cfg);
    for (const std::string& o : args.overrides) apply_override(cfg, o);
    cfg.validate();
    return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write output file: " + path.string());
    out << content;
}

// Shared by eval/zeroshot/params: rebuild the model a checkpoint was saved
// from and restore its parameters.
struct RestoredModel {
    ExperimentConfig cfg;
    SyntheticDataset data;
    Model model;
};

RestoredModel restore(const std::string& ckpt_path,
                      const std::vector<std::string>& overrides) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    ExperimentConfig cfg = parse_config_text(ckpt.config_text);
    for (const std::string& o : overrides) apply_override(cfg, o);
    cfg.validate();
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model model = build_from_experiment(cfg, data);
    restore_params(model.params, ckpt);
    return {std::move(cfg), std::move(data), std::move(model)};
}

int cmd_train(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model model = build_from_experiment(cfg, data);
    fs::create_directories(args.out_dir);

    std::ofstream metrics(fs::path(args.out_dir) / "metrics.tsv");
    if (!metrics)
        throw FormatError("cannot write metrics file under " + args.out_dir);
    std::cout << MetricsReport::tsv_header();
    MetricsReport report = train(model, data, cfg.train, &metrics);
    for (const MetricsRow& r : report.rows) std::cout << MetricsReport::tsv_line(r);

    std::string cfg_text = config_to_text(cfg);
    write_file(fs::path(args.out_dir) / "config.cfg", cfg_text);
    model.vocab.save((fs::path(args.out_dir) / "vocab.txt").string());
    save_checkpoint(model.params, cfg_text,
                    static_cast<std::uint32_t>(cfg.train.epochs),
                    (fs::path(args.out_dir) / "final.ckpt").string());
    std::cout << "checkpoint: " << (fs::path(args.out_dir) / "final.ckpt").string()
              << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const CommonArgs& args) {
    RestoredModel r = restore(ckpt_path, args.overrides);
    EvalResult vc{0, 0};
    if (r.model.heads.vc)
        vc = evaluate_supervised(r.model, r.data.val, r.data.train_classes,
                                 SupPath::kVcHead);
    EvalResult cmc = evaluate_supervised(r.model, r.data.val, r.data.train_classes,
                                         SupPath::kCmcSimilarity);
    double zs = evaluate_zero_shot(r.model, r.data.holdout, r.data.holdout_classes,
                                   r.data.train_classes);
    SupPath sup = r.model.heads.vc ? SupPath::kVcHead : SupPath::kCmcSimilarity;
    std::vector<double> per_class =
        per_class_accuracy(r.model, r.data.val, r.data.train_classes, sup);
    double motion = 0;
    idx motion_n = 0;
    for (size_t c = 0; c < r.data.train_classes.size(); ++c)
        if (is_motion_class(r.data.train_classes[c])) {
            motion += per_class[c];
            ++motion_n;
        }
    if (motion_n) motion /= double(motion_n);
    std::ostringstream os;
    os << "vc_top1\tvc_top5\tcmc_top1\tcmc_top5\tzeroshot_top1\tmotion_top1\n";
    os << vc.top1 << "\t" << vc.top5 << "\t" << cmc.top1 << "\t" << cmc.top5 << "\t"
       << zs << "\t" << motion << "\n";
    std::cout << os.str();
    fs::create_directories(args.out_dir);
    write_file(fs::path(args.out_dir) / "eval.tsv", os.str());
    return 0;
}

int cmd_zeroshot(const std::string& ckpt_path, const CommonArgs& args) {
    RestoredModel r = restore(ckpt_path, args.overrides);
    double zs = evaluate_zero_shot(r.model, r.data.holdout, r.data.holdout_classes,
                                   r.data.train_classes);
    std::ostringstream os;
    os << "zeroshot_top1\t" << zs << "\n";
    std::cout << os.str();
    fs::create_directories(args.out_dir);
    write_file(fs::path(args.out_dir) / "zeroshot.tsv", os.str());
    return 0;
}

// Tiny full-structure model: every adapter present, all four heads, batch 2.
// Width is the variable that makes finite differences affordable.
ExperimentConfig gradcheck_defaults() {
    ExperimentConfig cfg;
    cfg.model.video_layers = 2;
    cfg.model.text_layers = 2;
    cfg.model.d_v = 8;
    cfg.model.d_l = 8;
    cfg.model.d_vl = 4;
    cfg.model.patch = 4;
    cfg.model.image = 8;
    cfg.model.frames = 2;
    cfg.model.heads_v = 2;
    cfg.model.heads_l = 2;
    cfg.model.max_text_len = 8;
    cfg.placement = AdapterPlacement::defaults(2, 2);
    cfg.placement.video_layers = {1, 2};
    cfg.placement.text_layers = {1, 2};
    cfg.data.per_class_train = 1;
    cfg.data.per_class_val = 1;
    cfg.data.per_class_holdout = 1;
    return cfg;
}

int cmd_gradcheck(const CommonArgs& args, double h, double tol) {
    ExperimentConfig cfg = gradcheck_defaults();
    if (!args.config_path.empty()) cfg = load_config_file(args.config_path, cfg);
    for (const std::string& o : args.overrides) apply_override(cfg, o);
    cfg.validate();

    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    // move off the zero-init point so every path carries gradient
    RandomSource rng(cfg.train.seed ^ 0x67726164ull);
    for (Parameter* p : m.params.trainable())
        for (double& v : p->tensor.data()) v = rng.normal(0.05);
    m.decoder.log_tau.data()[0] = std::log(kTauInit);

    const VideoClip& c0 = data.train.clips[0];
    const VideoClip& c1 = data.train.clips[1];
    idx l0 = data.train.labels[0], l1 = data.train.labels[1];
    TokenSequence t0 = tokenize(kPromptPrefix + data.train_classes[size_t(l0)],
                                m.vocab, cfg.model.max_text_len);
    TokenSequence t1 = tokenize(kPromptPrefix + data.train_classes[size_t(l1)],
                                m.vocab, cfg.model.max_text_len);
    LabelSet labels =
        make_label_set(data.train_classes, m.vocab, cfg.model.max_text_len);

    // The VC head is a stop-gradient probe: its analytic gradient into the
    // towers is zero by design, but a finite difference would still see the
    // probe input move. Feed it the baseline embeddings so both sides agree.
    std::vector<double> vc_input;
    {
        VideoEmbedding v0 = encode_video(m, c0);
        VideoEmbedding v1 = encode_video(m, c1);
        vc_input = v0.pooled.data();
        vc_input.insert(vc_input.end(), v1.pooled.data().begin(),
                        v1.pooled.data().end());
    }

    auto f = [&]() {
        VideoEmbedding v0 = encode_video(m, c0);
        VideoEmbedding v1 = encode_video(m, c1);
        Tensor videos = concat(0, {reshape(v0.pooled, {1, cfg.model.d_vl}),
                                   reshape(v1.pooled, {1, cfg.model.d_vl})});
        Tensor texts = concat(0, {reshape(encode_text(m, t0), {1, cfg.model.d_vl}),
                                  reshape(encode_text(m, t1), {1, cfg.model.d_vl})});
        std::vector<idx> cls = {l0, l1};
        LossParts parts;
        if (m.heads.contrastive)
            parts.contrastive =
                contrastive_loss(videos, texts, m.decoder.log_tau, cls);
        if (m.heads.cmc) {
            compute_label_embeddings(m, labels);
            parts.cmc = cmc_loss(videos, labels.embeddings, m.decoder.log_tau, cls);
        }
        if (m.heads.vc) {
            Tensor vc_in({2, cfg.model.d_vl}, vc_input);
            parts.vc = cross_entropy(vc_logits(vc_in, m.decoder), cls);
        }
        if (m.heads.cmlm) {
            TokenSequence masked = t0;
            std::vector<idx> orig = masked.ids;
            masked.mask_positions = {2};
            masked.ids[2] = Vocab::kMask;
            Tensor feats = text_encoder_forward(masked, m.text, m.adapters, m.cfg);
            parts.cmlm = cmlm_loss(
                cmlm_forward(feats, v0.frame_embeds, *m.decoder.cmlm, m.cfg.heads_l),
                orig, masked.mask_positions);
        }
        return aggregate_losses(parts, m.heads);
    };

    GradCheckReport report = finite_difference_check(f, m.params, h, tol);
    std::cout << format_report(report);
    return report.all_ok ? 0 : 1;
}

int cmd_ablate(const std::string& suite_name, const CommonArgs& args) {
    AblationSuite suite = ablation_suite_from_string(suite_name);
    ExperimentConfig cfg = resolve_config(args);
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    AblationTable table = run_ablation(suite, cfg, data, &std::cerr);
    std::cout << table.pretty();
    fs::create_directories(args.out_dir);
    write_file(fs::path(args.out_dir) / (to_string(suite) + ".tsv"), table.tsv());
    write_file(fs::path(args.out_dir) / (to_string(suite) + ".txt"), table.pretty());
    return 0;
}

int cmd_params(const std::string& ckpt_path, const CommonArgs& args) {
    if (!ckpt_path.empty()) {
        RestoredModel r = restore(ckpt_path, args.overrides);
        std::cout << params_table(r.model.params);
        return 0;
    }
    ExperimentConfig cfg = resolve_config(args);
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    Model m = build_from_experiment(cfg, data);
    std::cout << params_table(m.params);
    idx expect = expected_trainable_params(m.cfg, m.placement, m.heads,
                                           m.vocab.size(), m.num_classes);
    std::cout << "closed_form_trainable\t" << expect << "\n";
    return 0;
}

int cmd_gen_data(const CommonArgs& args) {
    ExperimentConfig cfg = resolve_config(args);
    SyntheticDataset data = generate_synthetic_dataset(dataset_config(cfg));
    std::ostringstream os;
    os << "split\tclass\tclips\tframes\timage\n";
    auto describe = [&](const std::string& split, const SplitData& s,
                        const std::vector<std::string>& names) {
        std::vector<idx> counts(names.size(), 0);
        for (idx l : s.labels) counts[static_cast<size_t>(l)]++;
        for (size_t c = 0; c < names.size(); ++c)
            os << split << "\t" << names[c] << "\t" << counts[c] << "\t"
               << data.cfg.frames << "\t" << data.cfg.image << "\n";
    };
    describe("train", data.train, data.train_classes);
    describe("val", data.val, data.train_classes);
    describe("holdout", data.holdout, data.holdout_classes);
    std::cout << os.str();
    fs::create_directories(args.out_dir);
    write_file(fs::path(args.out_dir) / "dataset.tsv", os.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multimodal multi-task video-language adapters"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, zs_args, grad_args, ablate_args, params_args,
        gen_args;
    std::string eval_ckpt, zs_ckpt, params_ckpt, suite = "ted_variants";
    double grad_h = 1e-5, grad_tol = 1e-4;

    std::string key_help = "config keys (also valid with --set):";
    for (const auto& [key, def, desc] : config_key_table())
        key_help += "\n  " + key + " = " + def + "  (" + desc + ")";

    CLI::App* t = app.add_subcommand("train", "train adapters and heads");
    add_common(t, train_args);
    t->footer(key_help);

    CLI::App* e = app.add_subcommand("eval", "supervised + zero-shot evaluation");
    e->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
    add_common(e, eval_args);

    CLI::App* z = app.add_subcommand("zeroshot", "zero-shot holdout accuracy");
    z->add_option("--checkpoint", zs_ckpt, "trained checkpoint")->required();
    add_common(z, zs_args);

    CLI::App* g = app.add_subcommand(
        "gradcheck", "finite-difference check of every trainable parameter");
    add_common(g, grad_args);
    g->add_option("--step", grad_h, "central-difference step");
    g->add_option("--tol", grad_tol, "max relative error tolerance");

    CLI::App* a = app.add_subcommand("ablate", "run an ablation suite");
    a->add_option("--suite", suite,
                  "ted_variants | text_adapter_count | head_subsets | component_stack");
    add_common(a, ablate_args);

    CLI::App* p = app.add_subcommand("params", "parameter accounting");
    p->add_option("--checkpoint", params_ckpt, "optional checkpoint to load");
    add_common(p, params_args);

    CLI::App* d = app.add_subcommand("gen-data", "render the synthetic dataset");
    add_common(d, gen_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return 2;
    }

    try {
        if (t->parsed()) return cmd_train(train_args);
        if (e->parsed()) return cmd_eval(eval_ckpt, eval_args);
        if (z->parsed()) return cmd_zeroshot(zs_ckpt, zs_args);
        if (g->parsed()) return cmd_gradcheck(grad_args, grad_h, grad_tol);
        if (a->parsed()) return cmd_ablate(suite, ablate_args);
        if (p->parsed()) return cmd_params(params_ckpt, params_args);
        if (d->parsed()) return cmd_gen_data(gen_args);
    } catch (const ConfigError& ex) {
        std::cerr << "config error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 2;
}
