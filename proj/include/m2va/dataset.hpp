#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2va/encoders.hpp"

namespace m2va {

struct DatasetConfig {
    idx per_class_train = 32;
    idx per_class_val = 8;
    idx per_class_holdout = 16;
    idx frames = 8;
    idx image = 24;
    std::uint64_t seed = 1;
};

struct SplitData {
    std::vector<VideoClip> clips;
    std::vector<idx> labels;  // indices into the owning class-name list
};

// Rendered moving-shapes corpus. Train classes split into three families:
// appearance (solvable per frame), motion direction (needs signed frame
// differences) and rate (needs longer temporal context). Holdout classes
// recombine the same words so zero-shot transfer is non-degenerate.
struct SyntheticDataset {
    std::vector<std::string> train_classes;
    std::vector<std::string> holdout_classes;
    SplitData train, val, holdout;
    DatasetConfig cfg;

    // words of every class name; feed to Vocab::build
    std::vector<std::string> corpus() const;
};

extern const std::vector<std::string> kTrainClassNames;    // 8 entries
extern const std::vector<std::string> kHoldoutClassNames;  // 4 entries

// Index of each class-name family, used by per-family accuracy reporting.
bool is_motion_class(const std::string& name);

SyntheticDataset generate_synthetic_dataset(const DatasetConfig& cfg);

// Single clip for a named class program; exposed for rendering oracles.
VideoClip render_clip(const std::string& class_name, idx T, idx image,
                      std::uint64_t clip_seed);

}  // namespace m2va
