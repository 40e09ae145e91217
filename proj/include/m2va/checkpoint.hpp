#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2va/params.hpp"

namespace m2va {

// On-disk layout (little endian): "M2CK", u32 version, u32 step, u32 tensor
// count; per tensor u16 name length + name, u8 dtype (0 = f32), u8 rank,
// u64 dims, f32 payload; then u64 config-text length + UTF-8 config text.
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::uint32_t step = 0;
    std::string config_text;
    std::vector<CheckpointTensor> tensors;
};

void save_checkpoint(const ParamRegistry& params, const std::string& config_text,
                     std::uint32_t step, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Copies values into same-named registry entries; a missing name or shape
// mismatch is a format error naming the offending tensor.
void restore_params(ParamRegistry& params, const Checkpoint& ckpt);

}  // namespace m2va
