#include "m2va/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace m2va {

namespace {

constexpr char kMagic[4] = {'M', '2', 'C', 'K'};

// values are written little endian; this implementation assumes a little
// endian host (asserted at startup in the CLI)
template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("checkpoint truncated while reading " + what);
    return v;
}

}  // namespace

void save_checkpoint(const ParamRegistry& params, const std::string& config_text,
                     std::uint32_t step, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint file: " + path);
    out.write(kMagic, 4);
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint32_t>(out, step);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.all().size()));
    for (const Parameter& p : params.all()) {
        write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_pod<std::uint8_t>(out, 0);  // dtype f32
        write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(p.tensor.ndim()));
        for (idx d : p.tensor.shape()) write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        for (double v : p.tensor.data()) write_pod<float>(out, static_cast<float>(v));
    }
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(config_text.size()));
    out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    if (!out) throw FormatError("failed while writing checkpoint file: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("not a checkpoint file (bad magic): " + path);
    auto version = read_pod<std::uint32_t>(in, "version");
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " in " + path);
    Checkpoint ckpt;
    ckpt.step = read_pod<std::uint32_t>(in, "step");
    auto count = read_pod<std::uint32_t>(in, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        auto name_len = read_pod<std::uint16_t>(in, "name length");
        t.name.resize(name_len);
        in.read(t.name.data(), name_len);
        if (!in) throw FormatError("checkpoint truncated while reading tensor name");
        auto dtype = read_pod<std::uint8_t>(in, "dtype of " + t.name);
        if (dtype != 0)
            throw FormatError("unsupported dtype tag " + std::to_string(dtype) +
                              " for tensor " + t.name);
        auto rank = read_pod<std::uint8_t>(in, "rank of " + t.name);
        idx numel = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            auto d = read_pod<std::uint64_t>(in, "dims of " + t.name);
            t.shape.push_back(static_cast<idx>(d));
            numel *= static_cast<idx>(d);
        }
        t.values.resize(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(t.values.data()),
                static_cast<std::streamsize>(sizeof(float) * t.values.size()));
        if (!in) throw FormatError("checkpoint truncated in payload of " + t.name);
        ckpt.tensors.push_back(std::move(t));
    }
    auto cfg_len = read_pod<std::uint64_t>(in, "config length");
    ckpt.config_text.resize(cfg_len);
    in.read(ckpt.config_text.data(), static_cast<std::streamsize>(cfg_len));
    if (!in) throw FormatError("checkpoint truncated in config text");
    return ckpt;
}

void restore_params(ParamRegistry& params, const Checkpoint& ckpt) {
    for (const CheckpointTensor& t : ckpt.tensors) {
        if (!params.contains(t.name))
            throw FormatError("checkpoint tensor \"" + t.name +
                              "\" has no matching parameter in this model");
        Tensor dst = params.at(t.name).tensor;
        if (dst.shape() != t.shape)
            throw FormatError("checkpoint tensor \"" + t.name + "\" has shape " +
                              shape_str(t.shape) + " but the model expects " +
                              shape_str(dst.shape()));
        for (size_t i = 0; i < t.values.size(); ++i)
            dst.data()[i] = static_cast<double>(t.values[i]);
    }
    if (ckpt.tensors.size() != params.all().size())
        throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                          " tensors but the model has " +
                          std::to_string(params.all().size()));
}

}  // namespace m2va
