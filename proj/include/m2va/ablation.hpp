#pragma once

#include <string>
#include <vector>

#include "m2va/train.hpp"

namespace m2va {

enum class AblationSuite { kTedVariants, kTextAdapterCount, kHeadSubsets,
                           kComponentStack };

AblationSuite ablation_suite_from_string(const std::string& s);
std::string to_string(AblationSuite s);

struct AblationRow {
    std::string variant;
    double sup_top1 = 0;      // supervised top-1 (VC head when present, else CMC)
    double cmc_top1 = 0;
    double zeroshot_top1 = 0;
    double motion_top1 = 0;   // mean accuracy over motion-direction classes
    idx trainable = 0;
};

struct AblationTable {
    AblationSuite suite;
    std::vector<AblationRow> rows;

    std::string pretty() const;  // aligned plain text
    std::string tsv() const;     // machine-readable mirror
};

// Trains one model per variant from the shared seed and dataset, then
// evaluates every variant on the same splits.
AblationTable run_ablation(AblationSuite suite, const ExperimentConfig& base,
                           const SyntheticDataset& data, std::ostream* log = nullptr);

}  // namespace m2va
