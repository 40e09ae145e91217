#include "m2va/ablation.hpp"

#include <iomanip>
#include <ostream>
#include <sstream>

namespace m2va {

AblationSuite ablation_suite_from_string(const std::string& s) {
    if (s == "ted_variants") return AblationSuite::kTedVariants;
    if (s == "text_adapter_count") return AblationSuite::kTextAdapterCount;
    if (s == "head_subsets") return AblationSuite::kHeadSubsets;
    if (s == "component_stack") return AblationSuite::kComponentStack;
    throw ConfigError("unknown ablation suite: " + s);
}

std::string to_string(AblationSuite s) {
    switch (s) {
        case AblationSuite::kTedVariants: return "ted_variants";
        case AblationSuite::kTextAdapterCount: return "text_adapter_count";
        case AblationSuite::kHeadSubsets: return "head_subsets";
        default: return "component_stack";
    }
}

namespace {

AblationRow run_variant(const std::string& name, const ExperimentConfig& cfg,
                        const SyntheticDataset& data, std::ostream* log) {
    if (log) *log << "# variant: " << name << "\n";
    Model m = build_from_experiment(cfg, data);
    train(m, data, cfg.train, nullptr);

    AblationRow row;
    row.variant = name;
    EvalResult cmc =
        evaluate_supervised(m, data.val, data.train_classes, SupPath::kCmcSimilarity);
    row.cmc_top1 = cmc.top1;
    row.sup_top1 = cmc.top1;
    SupPath sup_path = SupPath::kCmcSimilarity;
    if (m.heads.vc) {
        row.sup_top1 =
            evaluate_supervised(m, data.val, data.train_classes, SupPath::kVcHead).top1;
        sup_path = SupPath::kVcHead;
    }
    row.zeroshot_top1 =
        evaluate_zero_shot(m, data.holdout, data.holdout_classes, data.train_classes);
    std::vector<double> per_class =
        per_class_accuracy(m, data.val, data.train_classes, sup_path);
    double motion_sum = 0;
    idx motion_n = 0;
    for (size_t c = 0; c < data.train_classes.size(); ++c)
        if (is_motion_class(data.train_classes[c])) {
            motion_sum += per_class[c];
            ++motion_n;
        }
    row.motion_top1 = motion_n ? motion_sum / double(motion_n) : 0.0;
    row.trainable = m.params.count_trainable();
    return row;
}

std::set<idx> layer_range(const std::string& which, idx layers) {
    std::set<idx> out;
    if (which == "front")
        for (idx i = 1; i <= layers / 2; ++i) out.insert(i);
    else if (which == "back")
        for (idx i = layers / 2 + 1; i <= layers; ++i) out.insert(i);
    else
        for (idx i = 1; i <= layers; ++i) out.insert(i);
    return out;
}

std::vector<AblationRow> ted_variants(const ExperimentConfig& base,
                                      const SyntheticDataset& data, std::ostream* log) {
    std::vector<AblationRow> rows;
    for (const std::string mode : {"te_only", "td_only", "parallel", "sequential"})
        for (const std::string range : {"front", "back", "all"}) {
            ExperimentConfig cfg = base;
            cfg.placement.ted_mode = ted_mode_from_string(mode);
            cfg.placement.video_layers = layer_range(range, cfg.model.video_layers);
            rows.push_back(run_variant(mode + "/" + range, cfg, data, log));
        }
    return rows;
}

std::vector<AblationRow> text_adapter_count(const ExperimentConfig& base,
                                            const SyntheticDataset& data,
                                            std::ostream* log) {
    std::vector<AblationRow> rows;
    for (idx k = 0; k <= base.model.text_layers; ++k) {
        ExperimentConfig cfg = base;
        cfg.placement.text_layers.clear();
        for (idx i = 0; i < k; ++i)  // deepest first
            cfg.placement.text_layers.insert(cfg.model.text_layers - i);
        rows.push_back(
            run_variant(std::to_string(k) + "_text_adapters", cfg, data, log));
    }
    return rows;
}

std::vector<AblationRow> head_subsets(const ExperimentConfig& base,
                                      const SyntheticDataset& data, std::ostream* log) {
    std::vector<AblationRow> rows;
    const std::vector<std::string> names = {"contrastive", "+cmc", "+cmlm", "+vc"};
    for (size_t stage = 0; stage < names.size(); ++stage) {
        ExperimentConfig cfg = base;
        cfg.heads.contrastive = true;
        cfg.heads.cmc = stage >= 1;
        cfg.heads.cmlm = stage >= 2;
        cfg.heads.vc = stage >= 3;
        rows.push_back(run_variant(names[stage], cfg, data, log));
    }
    return rows;
}

std::vector<AblationRow> component_stack(const ExperimentConfig& base,
                                         const SyntheticDataset& data,
                                         std::ostream* log) {
    std::vector<AblationRow> rows;

    ExperimentConfig frozen = base;  // untrained frozen towers, similarity readout
    frozen.placement.video_layers.clear();
    frozen.placement.text_layers.clear();
    frozen.heads = HeadConfig{};
    frozen.heads.cmc = frozen.heads.cmlm = frozen.heads.vc = false;
    frozen.train.epochs = 0;
    rows.push_back(run_variant("frozen_baseline", frozen, data, log));

    ExperimentConfig ted = frozen;  // + trained TED adapters, contrastive only
    ted.train.epochs = base.train.epochs;
    ted.placement.video_layers = base.placement.video_layers;
    rows.push_back(run_variant("+ted_adapter", ted, data, log));

    ExperimentConfig multi = ted;  // + text adapters on both towers
    multi.placement.text_layers = base.placement.text_layers;
    rows.push_back(run_variant("+multimodal_adapters", multi, data, log));

    ExperimentConfig full = multi;  // + the remaining decoder heads
    full.heads = base.heads;
    rows.push_back(run_variant("+multitask_decoder", full, data, log));
    return rows;
}

}  // namespace

AblationTable run_ablation(AblationSuite suite, const ExperimentConfig& base,
                           const SyntheticDataset& data, std::ostream* log) {
    AblationTable table;
    table.suite = suite;
    switch (suite) {
        case AblationSuite::kTedVariants:
            table.rows = ted_variants(base, data, log);
            break;
        case AblationSuite::kTextAdapterCount:
            table.rows = text_adapter_count(base, data, log);
            break;
        case AblationSuite::kHeadSubsets:
            table.rows = head_subsets(base, data, log);
            break;
        case AblationSuite::kComponentStack:
            table.rows = component_stack(base, data, log);
            break;
    }
    return table;
}

std::string AblationTable::pretty() const {
    std::ostringstream os;
    os << "suite: " << to_string(suite) << "\n";
    os << std::left << std::setw(24) << "variant" << std::right << std::setw(10)
       << "sup_top1" << std::setw(10) << "cmc_top1" << std::setw(10) << "zs_top1"
       << std::setw(12) << "motion_top1" << std::setw(11) << "trainable" << "\n";
    os << std::fixed << std::setprecision(4);
    for (const AblationRow& r : rows)
        os << std::left << std::setw(24) << r.variant << std::right << std::setw(10)
           << r.sup_top1 << std::setw(10) << r.cmc_top1 << std::setw(10)
           << r.zeroshot_top1 << std::setw(12) << r.motion_top1 << std::setw(11)
           << r.trainable << "\n";
    return os.str();
}

std::string AblationTable::tsv() const {
    std::ostringstream os;
    os << "variant\tsup_top1\tcmc_top1\tzeroshot_top1\tmotion_top1\ttrainable\n";
    os << std::fixed << std::setprecision(6);
    for (const AblationRow& r : rows)
        os << r.variant << "\t" << r.sup_top1 << "\t" << r.cmc_top1 << "\t"
           << r.zeroshot_top1 << "\t" << r.motion_top1 << "\t" << r.trainable << "\n";
    return os.str();
}

}  // namespace m2va
