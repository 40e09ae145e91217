#pragma once

#include <map>
#include <string>
#include <vector>

#include "m2va/tensor.hpp"

namespace m2va {

struct Parameter {
    std::string name;  // hierarchical, e.g. "video.layer3.ted.w_dn"
    Tensor tensor;
    bool trainable = false;
};

// Ordered registry of named parameters. Creation order is the canonical
// ordering used by the optimizer, checkpoints and reports.
class ParamRegistry {
public:
    // Returned handles share storage with the registry entry.
    Tensor create(const std::string& name, Tensor t, bool trainable);
    Tensor create_randn(const std::string& name, const Shape& shape, double stddev,
                        bool trainable, RandomSource& rng);
    Tensor create_zeros(const std::string& name, const Shape& shape, bool trainable);

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }

    std::vector<Parameter*> trainable();
    idx count_trainable() const;
    idx count_frozen() const;
    // per-module breakdown; layer components are kept distinct
    std::map<std::string, idx> breakdown(bool trainable_only) const;

    void zero_grads();

private:
    std::vector<Parameter> params_;
    std::map<std::string, size_t> index_;
};

}  // namespace m2va
