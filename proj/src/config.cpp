#include "m2va/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

namespace m2va {

void TrainConfig::validate(bool contrastive_enabled) const {
    if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (contrastive_enabled && batch_size < 2)
        throw ConfigError("train.batch_size must be at least 2 with the contrastive head");
    if (lr < 0) throw ConfigError("train.lr must be non-negative");
    if (vc_lr_scale < 0) throw ConfigError("train.vc_lr_scale must be non-negative");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
        throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
    if (eps <= 0) throw ConfigError("train.eps must be positive");
    if (eval_every < 1) throw ConfigError("train.eval_every must be positive");
    if (mask_ratio < 0 || mask_ratio > 1)
        throw ConfigError("train.mask_ratio must lie in [0, 1]");
}

void ExperimentConfig::validate() const {
    EncoderConfig m = model;
    m.vocab_size = 1;  // filled later from the vocabulary
    m.validate();
    train.validate(heads.contrastive);
    if (!heads.any_enabled())
        throw ConfigError("at least one head must be enabled");
}

DatasetConfig dataset_config(const ExperimentConfig& cfg) {
    DatasetConfig d = cfg.data;
    d.frames = cfg.model.frames;
    d.image = cfg.model.image;
    return d;
}

namespace {

idx to_idx(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        idx out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects an integer, got \"" + v + "\"");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a number, got \"" + v + "\"");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + " expects true/false, got \"" + v + "\"");
}

std::set<idx> to_layer_set(const std::string& key, const std::string& v) {
    std::set<idx> out;
    if (v.empty() || v == "none") return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.insert(to_idx(key, item));
    return out;
}

std::string layer_set_str(const std::set<idx>& s) {
    if (s.empty()) return "none";
    std::string out;
    for (idx i : s) out += (out.empty() ? "" : ",") + std::to_string(i);
    return out;
}

std::string num_str(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

struct KeyDef {
    std::string name;
    std::string desc;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<KeyDef>& key_defs() {
    static const std::vector<KeyDef> defs = [] {
        std::vector<KeyDef> d;
        auto add_idx = [&](const std::string& name, auto get_ref, const std::string& desc) {
            d.push_back({name, desc,
                         [name, get_ref](ExperimentConfig& c, const std::string& v) {
                             get_ref(c) = to_idx(name, v);
                         },
                         [get_ref](const ExperimentConfig& c) {
                             return std::to_string(get_ref(const_cast<ExperimentConfig&>(c)));
                         }});
        };
        auto add_dbl = [&](const std::string& name, auto get_ref, const std::string& desc) {
            d.push_back({name, desc,
                         [name, get_ref](ExperimentConfig& c, const std::string& v) {
                             get_ref(c) = to_double(name, v);
                         },
                         [get_ref](const ExperimentConfig& c) {
                             return num_str(get_ref(const_cast<ExperimentConfig&>(c)));
                         }});
        };
        auto add_bool = [&](const std::string& name, auto get_ref, const std::string& desc) {
            d.push_back({name, desc,
                         [name, get_ref](ExperimentConfig& c, const std::string& v) {
                             get_ref(c) = to_bool(name, v);
                         },
                         [get_ref](const ExperimentConfig& c) {
                             return get_ref(const_cast<ExperimentConfig&>(c)) ? "true"
                                                                              : "false";
                         }});
        };

        add_idx("model.video_layers", [](ExperimentConfig& c) -> idx& { return c.model.video_layers; }, "video tower depth");
        add_idx("model.text_layers", [](ExperimentConfig& c) -> idx& { return c.model.text_layers; }, "text tower depth");
        add_idx("model.d_v", [](ExperimentConfig& c) -> idx& { return c.model.d_v; }, "video width");
        add_idx("model.d_l", [](ExperimentConfig& c) -> idx& { return c.model.d_l; }, "text width");
        add_idx("model.d_vl", [](ExperimentConfig& c) -> idx& { return c.model.d_vl; }, "joint embedding width");
        add_idx("model.patch", [](ExperimentConfig& c) -> idx& { return c.model.patch; }, "patch size");
        add_idx("model.image", [](ExperimentConfig& c) -> idx& { return c.model.image; }, "frame height and width");
        add_idx("model.frames", [](ExperimentConfig& c) -> idx& { return c.model.frames; }, "frames per clip");
        add_idx("model.heads_v", [](ExperimentConfig& c) -> idx& { return c.model.heads_v; }, "video attention heads");
        add_idx("model.heads_l", [](ExperimentConfig& c) -> idx& { return c.model.heads_l; }, "text attention heads");
        add_idx("model.mlp_ratio", [](ExperimentConfig& c) -> idx& { return c.model.mlp_ratio; }, "FFN width multiplier");
        add_idx("model.max_text_len", [](ExperimentConfig& c) -> idx& { return c.model.max_text_len; }, "token sequence length");
        add_idx("model.adapter_ratio", [](ExperimentConfig& c) -> idx& { return c.model.adapter_ratio; }, "bottleneck divisor (r = d / ratio)");
        add_idx("model.k_t", [](ExperimentConfig& c) -> idx& { return c.model.k_t; }, "TED temporal kernel size");
        add_idx("model.k_s", [](ExperimentConfig& c) -> idx& { return c.model.k_s; }, "TED spatial kernel size");

        d.push_back({"placement.video_layers",
                     "comma list of 1-based layers with TED adapters, or none",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.placement.video_layers =
                             to_layer_set("placement.video_layers", v);
                     },
                     [](const ExperimentConfig& c) {
                         return layer_set_str(c.placement.video_layers);
                     }});
        d.push_back({"placement.text_layers",
                     "comma list of 1-based layers with text adapters, or none",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.placement.text_layers =
                             to_layer_set("placement.text_layers", v);
                     },
                     [](const ExperimentConfig& c) {
                         return layer_set_str(c.placement.text_layers);
                     }});
        d.push_back({"placement.ted_mode",
                     "parallel | sequential | te_only | td_only",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.placement.ted_mode = ted_mode_from_string(v);
                     },
                     [](const ExperimentConfig& c) {
                         return to_string(c.placement.ted_mode);
                     }});
        d.push_back({"placement.seq_order", "te_td | td_te (sequential mode order)",
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "te_td")
                             c.placement.seq_order = SeqOrder::kTeThenTd;
                         else if (v == "td_te")
                             c.placement.seq_order = SeqOrder::kTdThenTe;
                         else
                             throw ConfigError(
                                 "config: placement.seq_order expects te_td or td_te, "
                                 "got \"" + v + "\"");
                     },
                     [](const ExperimentConfig& c) {
                         return c.placement.seq_order == SeqOrder::kTeThenTd ? "te_td"
                                                                             : "td_te";
                     }});

        add_bool("heads.contrastive", [](ExperimentConfig& c) -> bool& { return c.heads.contrastive; }, "enable the contrastive head");
        add_bool("heads.cmc", [](ExperimentConfig& c) -> bool& { return c.heads.cmc; }, "enable the cross-modal classification head");
        add_bool("heads.cmlm", [](ExperimentConfig& c) -> bool& { return c.heads.cmlm; }, "enable the masked language modeling head");
        add_bool("heads.vc", [](ExperimentConfig& c) -> bool& { return c.heads.vc; }, "enable the visual classification head");
        add_dbl("heads.w_contrastive", [](ExperimentConfig& c) -> double& { return c.heads.w_contrastive; }, "contrastive loss weight");
        add_dbl("heads.w_cmc", [](ExperimentConfig& c) -> double& { return c.heads.w_cmc; }, "CMC loss weight");
        add_dbl("heads.w_cmlm", [](ExperimentConfig& c) -> double& { return c.heads.w_cmlm; }, "CMLM loss weight");
        add_dbl("heads.w_vc", [](ExperimentConfig& c) -> double& { return c.heads.w_vc; }, "VC loss weight");

        add_idx("train.epochs", [](ExperimentConfig& c) -> idx& { return c.train.epochs; }, "training epochs");
        add_idx("train.batch_size", [](ExperimentConfig& c) -> idx& { return c.train.batch_size; }, "clips per step");
        add_dbl("train.lr", [](ExperimentConfig& c) -> double& { return c.train.lr; }, "learning rate");
        add_dbl("train.vc_lr_scale", [](ExperimentConfig& c) -> double& { return c.train.vc_lr_scale; }, "lr multiplier for the VC probe");
        d.push_back({"train.schedule", "constant | cosine (per-epoch lr decay)",
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "constant")
                             c.train.schedule = LrSchedule::kConstant;
                         else if (v == "cosine")
                             c.train.schedule = LrSchedule::kCosine;
                         else
                             throw ConfigError(
                                 "config: train.schedule expects constant or cosine, "
                                 "got \"" + v + "\"");
                     },
                     [](const ExperimentConfig& c) {
                         return c.train.schedule == LrSchedule::kConstant ? "constant"
                                                                          : "cosine";
                     }});
        d.push_back({"train.optimizer", "adam | sgd",
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "adam")
                             c.train.optimizer = Optimizer::kAdam;
                         else if (v == "sgd")
                             c.train.optimizer = Optimizer::kSgd;
                         else
                             throw ConfigError(
                                 "config: train.optimizer expects adam or sgd, got \"" +
                                 v + "\"");
                     },
                     [](const ExperimentConfig& c) {
                         return c.train.optimizer == Optimizer::kAdam ? "adam" : "sgd";
                     }});
        add_dbl("train.beta1", [](ExperimentConfig& c) -> double& { return c.train.beta1; }, "first moment coefficient");
        add_dbl("train.beta2", [](ExperimentConfig& c) -> double& { return c.train.beta2; }, "second moment coefficient");
        add_dbl("train.eps", [](ExperimentConfig& c) -> double& { return c.train.eps; }, "optimizer epsilon");
        d.push_back({"train.seed", "model/init/shuffle seed",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.train.seed =
                             static_cast<std::uint64_t>(to_idx("train.seed", v));
                     },
                     [](const ExperimentConfig& c) {
                         return std::to_string(c.train.seed);
                     }});
        add_idx("train.eval_every", [](ExperimentConfig& c) -> idx& { return c.train.eval_every; }, "epochs between metric rows");
        add_dbl("train.mask_ratio", [](ExperimentConfig& c) -> double& { return c.train.mask_ratio; }, "CMLM masking ratio");

        add_idx("data.per_class_train", [](ExperimentConfig& c) -> idx& { return c.data.per_class_train; }, "training clips per class");
        add_idx("data.per_class_val", [](ExperimentConfig& c) -> idx& { return c.data.per_class_val; }, "validation clips per class");
        add_idx("data.per_class_holdout", [](ExperimentConfig& c) -> idx& { return c.data.per_class_holdout; }, "zero-shot clips per class");
        d.push_back({"data.seed", "dataset rendering seed",
                     [](ExperimentConfig& c, const std::string& v) {
                         c.data.seed = static_cast<std::uint64_t>(to_idx("data.seed", v));
                     },
                     [](const ExperimentConfig& c) {
                         return std::to_string(c.data.seed);
                     }});
        return d;
    }();
    return defs;
}

const KeyDef& find_key(const std::string& name) {
    for (const KeyDef& k : key_defs())
        if (k.name == name) return k;
    throw ConfigError("config: unknown key \"" + name + "\"");
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text,
                                   const ExperimentConfig& base) {
    ExperimentConfig cfg = base;
    std::istringstream in(text);
    std::string line;
    std::set<std::string> seen;
    idx lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value, got \"" + line + "\"");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second)
            std::cerr << "warning: duplicate config key \"" << key
                      << "\", last value wins\n";
        find_key(key).set(cfg, value);
    }
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path,
                                  const ExperimentConfig& base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), base);
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must be key=value, got \"" + assignment + "\"");
    find_key(trim(assignment.substr(0, eq)))
        .set(cfg, trim(assignment.substr(eq + 1)));
}

std::string config_to_text(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const KeyDef& k : key_defs()) os << k.name << " = " << k.get(cfg) << "\n";
    return os.str();
}

std::vector<std::array<std::string, 3>> config_key_table() {
    ExperimentConfig defaults;
    std::vector<std::array<std::string, 3>> out;
    for (const KeyDef& k : key_defs())
        out.push_back({k.name, k.get(defaults), k.desc});
    return out;
}

}  // namespace m2va
