#include "m2va/dataset.hpp"

#include <algorithm>
#include <random>

namespace m2va {

const std::vector<std::string> kTrainClassNames = {
    "bright square",  "dark square",      // appearance family
    "moving left",    "moving right",     // motion-direction family
    "moving up",      "moving down",
    "growing square", "shrinking square", // rate family
};

const std::vector<std::string> kHoldoutClassNames = {
    "bright moving left",
    "dark moving right",
    "bright growing",
    "dark shrinking",
};

bool is_motion_class(const std::string& name) {
    return name.find("moving") != std::string::npos;
}

std::vector<std::string> SyntheticDataset::corpus() const {
    std::vector<std::string> out = train_classes;
    out.insert(out.end(), holdout_classes.begin(), holdout_classes.end());
    return out;
}

namespace {

struct ClipProgram {
    double intensity = 0.0;       // square brightness; sign carries appearance
    idx dy = 0, dx = 0;           // per-frame motion in pixels
    idx half = 4;                 // initial half-extent
    idx grow = 0;                 // per-frame half-extent change
};

bool has_word(const std::string& name, const std::string& w) {
    for (const std::string& s : split_words(name))
        if (s == w) return true;
    return false;
}

ClipProgram program_for(const std::string& name, std::mt19937_64& rng) {
    ClipProgram p;
    std::uniform_real_distribution<double> mag(1.3, 1.7);
    if (has_word(name, "bright")) {
        p.intensity = mag(rng);
    } else if (has_word(name, "dark")) {
        p.intensity = -mag(rng);
    } else {
        // motion/rate-only classes: brightness sign is uninformative
        p.intensity = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
    }
    if (has_word(name, "left")) p.dx = -1;
    if (has_word(name, "right")) p.dx = 1;
    if (has_word(name, "up")) p.dy = -1;
    if (has_word(name, "down")) p.dy = 1;
    if (has_word(name, "growing")) {
        p.half = 2;
        p.grow = 1;
    }
    if (has_word(name, "shrinking")) {
        p.half = 9;
        p.grow = -1;
    }
    return p;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

}  // namespace

VideoClip render_clip(const std::string& class_name, idx T, idx image,
                      std::uint64_t clip_seed) {
    std::mt19937_64 rng(clip_seed);
    ClipProgram p = program_for(class_name, rng);

    // largest half-extent over the clip, for in-bounds placement
    idx max_half = p.half + (p.grow > 0 ? p.grow * (T - 1) : 0);
    idx travel = (std::max(std::llabs(p.dy), std::llabs(p.dx))) * (T - 1);
    idx margin = max_half + travel + 1;
    idx lo = std::min(margin, image / 2), hi = std::max(image - margin, image / 2);
    std::uniform_int_distribution<idx> pos(lo, hi);
    idx cy = pos(rng), cx = pos(rng);
    // step back so motion crosses the center
    cy -= p.dy * (T - 1) / 2;
    cx -= p.dx * (T - 1) / 2;

    std::normal_distribution<double> noise(0.0, 0.05);
    std::normal_distribution<double> tint(0.0, 0.1);
    double color[3] = {tint(rng), tint(rng), tint(rng)};

    Tensor frames(Shape{T, image, image, 3});
    double* d = frames.data().data();
    for (idx t = 0; t < T; ++t) {
        for (idx i = 0; i < image * image * 3; ++i)
            d[t * image * image * 3 + i] = noise(rng);  // fresh texture per frame
        idx half = p.half + p.grow * t;
        idx y = cy + p.dy * t, x = cx + p.dx * t;
        for (idx yy = std::max<idx>(0, y - half); yy <= std::min(image - 1, y + half); ++yy)
            for (idx xx = std::max<idx>(0, x - half); xx <= std::min(image - 1, x + half);
                 ++xx)
                for (idx c = 0; c < 3; ++c)
                    d[((t * image + yy) * image + xx) * 3 + c] =
                        p.intensity + color[c];
    }
    return VideoClip{frames};
}

namespace {

SplitData make_split(const std::vector<std::string>& classes, idx per_class,
                     const DatasetConfig& cfg, std::uint64_t split_tag) {
    SplitData s;
    for (idx c = 0; c < static_cast<idx>(classes.size()); ++c)
        for (idx i = 0; i < per_class; ++i) {
            std::uint64_t seed =
                mix(mix(cfg.seed, split_tag), mix(static_cast<std::uint64_t>(c),
                                                  static_cast<std::uint64_t>(i)));
            s.clips.push_back(render_clip(classes[size_t(c)], cfg.frames, cfg.image, seed));
            s.labels.push_back(c);
        }
    return s;
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const DatasetConfig& cfg) {
    if (cfg.per_class_train < 1 || cfg.per_class_val < 1 || cfg.per_class_holdout < 1)
        throw ConfigError("dataset: per-class clip counts must be positive");
    if (cfg.frames < 1 || cfg.image < 8)
        throw ConfigError("dataset: frames must be positive and image at least 8");
    SyntheticDataset d;
    d.cfg = cfg;
    d.train_classes = kTrainClassNames;
    d.holdout_classes = kHoldoutClassNames;
    d.train = make_split(d.train_classes, cfg.per_class_train, cfg, 1);
    d.val = make_split(d.train_classes, cfg.per_class_val, cfg, 2);
    d.holdout = make_split(d.holdout_classes, cfg.per_class_holdout, cfg, 3);
    return d;
}

}  // namespace m2va
