#include "m2va/adapters.hpp"

namespace m2va {

TedMode ted_mode_from_string(const std::string& s) {
    if (s == "parallel") return TedMode::kParallel;
    if (s == "sequential") return TedMode::kSequential;
    if (s == "te_only") return TedMode::kTeOnly;
    if (s == "td_only") return TedMode::kTdOnly;
    throw ConfigError("unknown ted mode: " + s);
}

std::string to_string(TedMode m) {
    switch (m) {
        case TedMode::kParallel: return "parallel";
        case TedMode::kSequential: return "sequential";
        case TedMode::kTeOnly: return "te_only";
        default: return "td_only";
    }
}

AdapterPlacement AdapterPlacement::defaults(idx video_layer_count, idx text_layer_count) {
    AdapterPlacement p;
    for (idx i = 1; i <= video_layer_count; ++i) p.video_layers.insert(i);
    p.text_layers.insert(text_layer_count);
    return p;
}

TEDAdapterWeights make_ted_adapter(ParamRegistry& reg, const std::string& prefix,
                                   idx d, idx r, idx k_t, idx k_s, RandomSource& rng) {
    if (k_t % 2 == 0 || k_s % 2 == 0)
        throw ConfigError("TED adapter kernel sizes must be odd");
    TEDAdapterWeights a;
    a.r = r;
    a.w_dn = reg.create_randn(prefix + ".w_dn", {d, r}, 0.02, true, rng);
    a.b_dn = reg.create_zeros(prefix + ".b_dn", {r}, true);
    a.w_up = reg.create_zeros(prefix + ".w_up", {r, d}, true);
    a.b_up = reg.create_zeros(prefix + ".b_up", {d}, true);
    a.conv1d_k = reg.create_randn(prefix + ".conv1d_k", {k_t, r, r}, 0.02, true, rng);
    a.conv1d_b = reg.create_zeros(prefix + ".conv1d_b", {r}, true);
    a.conv2d_k = reg.create_randn(prefix + ".conv2d_k", {k_s, k_s, r, r}, 0.02, true, rng);
    a.conv2d_b = reg.create_zeros(prefix + ".conv2d_b", {r}, true);
    return a;
}

TextAdapterWeights make_text_adapter(ParamRegistry& reg, const std::string& prefix,
                                     idx d, idx r, RandomSource& rng) {
    TextAdapterWeights a;
    a.w_dn = reg.create_randn(prefix + ".w_dn", {d, r}, 0.02, true, rng);
    a.b_dn = reg.create_zeros(prefix + ".b_dn", {r}, true);
    a.w_up = reg.create_zeros(prefix + ".w_up", {r, d}, true);
    a.b_up = reg.create_zeros(prefix + ".b_up", {d}, true);
    return a;
}

Tensor ted_temporal_enhance(const Tensor& z, const TEDAdapterWeights& a) {
    Tensor down = add(matmul(z, a.w_dn), a.b_dn);          // [T, 1+M, r]
    Tensor conv = conv1d_temporal(down, a.conv1d_k, a.conv1d_b);
    return add(matmul(conv, a.w_up), a.b_up);
}

Tensor ted_temporal_difference(const Tensor& z_patches, const TEDAdapterWeights& a,
                               idx h, idx w) {
    idx T = z_patches.dim(0), M = z_patches.dim(1);
    if (h * w != M)
        throw ConfigError("ted_temporal_difference: grid " + std::to_string(h) + "x" +
                          std::to_string(w) + " does not cover " + std::to_string(M) +
                          " patch tokens");
    // project first: the down bias cancels in the frame subtraction
    Tensor down = matmul(z_patches, a.w_dn);               // [T, M, r]
    Tensor diff;
    if (T == 1) {
        diff = Tensor::zeros({1, M, a.r});
    } else {
        Tensor cur = slice(down, 0, 1, T - 1);
        Tensor prev = slice(down, 0, 0, T - 1);
        // first frame has no predecessor; its difference is defined as zero
        diff = concat(0, {Tensor::zeros({1, M, a.r}), sub(cur, prev)});
    }
    Tensor grid = reshape(diff, {T, h, w, a.r});
    Tensor conv = conv2d_spatial(grid, a.conv2d_k, a.conv2d_b);
    return matmul(reshape(conv, {T, M, a.r}), a.w_up);
}

namespace {
// TD branch output with the zero class-token row reattached.
Tensor td_with_class_row(const Tensor& z, const TEDAdapterWeights& a, idx h, idx w) {
    idx T = z.dim(0), L = z.dim(1), d = z.dim(2);
    Tensor patches = slice(z, 1, 1, L - 1);
    Tensor td = ted_temporal_difference(patches, a, h, w);
    return concat(1, {Tensor::zeros({T, 1, d}), td});
}
}  // namespace

Tensor ted_forward(const Tensor& z, const TEDAdapterWeights& a, TedMode mode,
                   SeqOrder order, idx h, idx w) {
    switch (mode) {
        case TedMode::kParallel:
            return add(add(ted_temporal_enhance(z, a), td_with_class_row(z, a, h, w)), z);
        case TedMode::kTeOnly:
            return add(ted_temporal_enhance(z, a), z);
        case TedMode::kTdOnly:
            return add(td_with_class_row(z, a, h, w), z);
        case TedMode::kSequential: {
            if (order == SeqOrder::kTeThenTd) {
                Tensor u = add(ted_temporal_enhance(z, a), z);
                return add(td_with_class_row(u, a, h, w), u);
            }
            Tensor u = add(td_with_class_row(z, a, h, w), z);
            return add(ted_temporal_enhance(u, a), u);
        }
    }
    throw ConfigError("unreachable ted mode");
}

Tensor text_adapter_forward(const Tensor& z, const TextAdapterWeights& a) {
    Tensor mid = gelu(add(matmul(z, a.w_dn), a.b_dn));
    return add(z, add(matmul(mid, a.w_up), a.b_up));
}

}  // namespace m2va
