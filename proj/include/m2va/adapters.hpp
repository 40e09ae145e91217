#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "m2va/params.hpp"
#include "m2va/tensor.hpp"

namespace m2va {

// How the temporal-enhancement and temporal-difference branches combine.
enum class TedMode { kParallel, kSequential, kTeOnly, kTdOnly };
// Branch order used by sequential mode.
enum class SeqOrder { kTeThenTd, kTdThenTe };

TedMode ted_mode_from_string(const std::string& s);
std::string to_string(TedMode m);

// Bottleneck adapter for the video branch: shared down/up projections around
// a temporal 1D conv (enhancement) and a spatial 2D conv on adjacent-frame
// differences. Up projection starts at exact zero so a fresh adapter is an
// identity map.
struct TEDAdapterWeights {
    Tensor w_dn, b_dn;       // [d_v, r], [r]
    Tensor w_up, b_up;       // [r, d_v], [d_v]; zero-initialized
    Tensor conv1d_k, conv1d_b;  // [k_t, r, r], [r]
    Tensor conv2d_k, conv2d_b;  // [k_s, k_s, r, r], [r]
    idx r = 0;
};

// Plain residual bottleneck with GELU, used on the text branch.
struct TextAdapterWeights {
    Tensor w_dn, b_dn;  // [d_l, r_l], [r_l]
    Tensor w_up, b_up;  // [r_l, d_l], [d_l]; zero-initialized
};

struct AdapterPlacement {
    std::set<idx> video_layers;  // 1-based indices receiving TED adapters
    TedMode ted_mode = TedMode::kParallel;
    SeqOrder seq_order = SeqOrder::kTeThenTd;
    std::set<idx> text_layers;   // 1-based; default is the deepest layer only

    static AdapterPlacement defaults(idx video_layer_count, idx text_layer_count);
};

struct AdapterSet {
    std::vector<std::optional<TEDAdapterWeights>> video;  // indexed by layer-1
    std::vector<std::optional<TextAdapterWeights>> text;
    TedMode mode = TedMode::kParallel;
    SeqOrder order = SeqOrder::kTeThenTd;
    idx grid_h = 0, grid_w = 0;
};

TEDAdapterWeights make_ted_adapter(ParamRegistry& reg, const std::string& prefix,
                                   idx d, idx r, idx k_t, idx k_s, RandomSource& rng);
TextAdapterWeights make_text_adapter(ParamRegistry& reg, const std::string& prefix,
                                     idx d, idx r, RandomSource& rng);

// z: [T, 1+M, d_v] including the class token row per frame.
Tensor ted_temporal_enhance(const Tensor& z, const TEDAdapterWeights& a);
// z_patches: [T, M, d_v]; M must equal h*w. The class token is excluded here;
// callers reattach a zero row.
Tensor ted_temporal_difference(const Tensor& z_patches, const TEDAdapterWeights& a,
                               idx h, idx w);
Tensor ted_forward(const Tensor& z, const TEDAdapterWeights& a, TedMode mode,
                   SeqOrder order, idx h, idx w);
Tensor text_adapter_forward(const Tensor& z, const TextAdapterWeights& a);

}  // namespace m2va
