#include "m2va/params.hpp"

namespace m2va {

Tensor ParamRegistry::create(const std::string& name, Tensor t, bool trainable) {
    if (index_.count(name))
        throw ContractError("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_[name] = params_.size();
    params_.push_back(Parameter{name, t, trainable});
    return t;
}

Tensor ParamRegistry::create_randn(const std::string& name, const Shape& shape,
                                   double stddev, bool trainable, RandomSource& rng) {
    return create(name, rng.randn(shape, stddev), trainable);
}

Tensor ParamRegistry::create_zeros(const std::string& name, const Shape& shape,
                                   bool trainable) {
    return create(name, Tensor::zeros(shape), trainable);
}

Parameter& ParamRegistry::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
}

const Parameter& ParamRegistry::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
}

std::vector<Parameter*> ParamRegistry::trainable() {
    std::vector<Parameter*> out;
    for (Parameter& p : params_)
        if (p.trainable) out.push_back(&p);
    return out;
}

idx ParamRegistry::count_trainable() const {
    idx n = 0;
    for (const Parameter& p : params_)
        if (p.trainable) n += p.tensor.numel();
    return n;
}

idx ParamRegistry::count_frozen() const {
    idx n = 0;
    for (const Parameter& p : params_)
        if (!p.trainable) n += p.tensor.numel();
    return n;
}

std::map<std::string, idx> ParamRegistry::breakdown(bool trainable_only) const {
    std::map<std::string, idx> out;
    for (const Parameter& p : params_) {
        if (trainable_only && !p.trainable) continue;
        auto pos = p.name.rfind('.');
        std::string module = pos == std::string::npos ? p.name : p.name.substr(0, pos);
        out[module] += p.tensor.numel();
    }
    return out;
}

void ParamRegistry::zero_grads() {
    for (Parameter& p : params_) p.tensor.zero_grad();
}

}  // namespace m2va
