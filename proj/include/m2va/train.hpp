#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "m2va/config.hpp"
#include "m2va/dataset.hpp"
#include "m2va/decoder.hpp"

namespace m2va {

struct MetricsRow {
    idx epoch = 0;
    double loss_total = 0, loss_contrastive = 0, loss_cmc = 0, loss_cmlm = 0,
           loss_vc = 0;
    double vc_top1 = 0, vc_top5 = 0, cmc_top1 = 0, cmc_top5 = 0, zeroshot_top1 = 0;
    idx trainable = 0, frozen = 0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;

    static std::string tsv_header();
    static std::string tsv_line(const MetricsRow& r);
    std::string to_tsv() const;  // header plus one line per row
};

enum class SupPath { kVcHead, kCmcSimilarity };

// Assembles the model for an experiment (vocabulary from the dataset corpus).
Model build_from_experiment(const ExperimentConfig& cfg, const SyntheticDataset& data);

// Full training loop: per step both towers run forward, label embeddings are
// recomputed, enabled heads contribute to the loss, and only trainable
// parameters move. Metric rows are appended every eval_every epochs (and
// after the final epoch) and streamed to `log` as TSV when given.
MetricsReport train(Model& m, const SyntheticDataset& data, const TrainConfig& cfg,
                    std::ostream* log = nullptr);

struct EvalResult {
    double top1 = 0, top5 = 0;
};

EvalResult evaluate_supervised(Model& m, const SplitData& split,
                               const std::vector<std::string>& class_names,
                               SupPath path);
// Per-class top-1 on the same split; index order follows class_names.
std::vector<double> per_class_accuracy(Model& m, const SplitData& split,
                                       const std::vector<std::string>& class_names,
                                       SupPath path);

// Eq-11 classification over prompted holdout labels. Overlapping train and
// holdout names violate the zero-shot contract.
double evaluate_zero_shot(Model& m, const SplitData& holdout,
                          const std::vector<std::string>& holdout_names,
                          const std::vector<std::string>& train_names);

// Masked-word recovery rate over the label corpus: every non-special token
// of every prompt is masked once and predicted through the CMLM block.
double cmlm_word_accuracy(Model& m, const SyntheticDataset& data);

std::string params_table(const ParamRegistry& params);

}  // namespace m2va
