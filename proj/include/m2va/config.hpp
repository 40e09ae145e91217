#pragma once

#include <array>
#include <string>
#include <vector>

#include "m2va/dataset.hpp"
#include "m2va/model.hpp"

namespace m2va {

enum class Optimizer { kAdam, kSgd };
enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
    idx epochs = 30;
    idx batch_size = 8;
    double lr = 3e-3;
    // The VC probe is stop-gradient and chases embeddings that move under it;
    // Adam step sizes ignore loss weights, so it gets its own lr multiplier.
    double vc_lr_scale = 10.0;
    LrSchedule schedule = LrSchedule::kCosine;
    Optimizer optimizer = Optimizer::kAdam;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t seed = 7;
    idx eval_every = 1;  // epochs between metric rows
    double mask_ratio = 0.15;

    void validate(bool contrastive_enabled) const;
};

// Everything an experiment needs, assembled from defaults, a config file and
// command-line overrides (in that order; later sources win).
struct ExperimentConfig {
    EncoderConfig model;
    AdapterPlacement placement = AdapterPlacement::defaults(4, 4);
    HeadConfig heads;
    TrainConfig train;
    DatasetConfig data;

    void validate() const;
};

// `key = value` lines, `#` comments, dotted keys. Unknown keys are errors;
// duplicate keys warn (to stderr) and keep the last value.
ExperimentConfig parse_config_text(const std::string& text,
                                   const ExperimentConfig& base = {});
ExperimentConfig load_config_file(const std::string& path,
                                  const ExperimentConfig& base = {});
// overrides are "key=value" strings applied after the file
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

// Round-trips through parse_config_text; used as the checkpoint snapshot.
std::string config_to_text(const ExperimentConfig& cfg);

// key -> default value -> description, for --help listings
std::vector<std::array<std::string, 3>> config_key_table();

// Dataset settings with frame count and image size taken from the model.
DatasetConfig dataset_config(const ExperimentConfig& cfg);

}  // namespace m2va
