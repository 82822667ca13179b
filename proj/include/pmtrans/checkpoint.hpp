#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pmtrans/binary_io.hpp"
#include "pmtrans/model.hpp"

namespace pmtrans {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// "PMTC", u32 version, then until EOF one block per parameter:
/// u32 name length, name bytes, u32 rank, rank × u32 extents, f32 payload.
inline std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& blocks) {
    io::Writer w;
    w.magic("PMTC");
    w.u32(kCheckpointVersion);
    for (const auto& b : blocks) {
        w.u32(static_cast<std::uint32_t>(b.name.size()));
        w.bytes(b.name.data(), b.name.size());
        w.u32(static_cast<std::uint32_t>(b.tensor.rank()));
        for (auto e : b.tensor.shape) w.u32(static_cast<std::uint32_t>(e));
        for (float v : b.tensor.data) w.f32(v);
    }
    return w.buffer();
}

inline std::vector<NamedTensor> decode_checkpoint(io::Reader& r) {
    r.expect_magic("PMTC");
    const std::size_t at = r.offset();
    if (std::uint32_t v = r.u32(); v != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(v), at);
    }
    std::vector<NamedTensor> out;
    while (!r.at_end()) {
        NamedTensor nt;
        nt.name = r.str(r.u32());
        Shape shape(r.u32());
        for (auto& e : shape) e = r.u32();
        r.need(numel(shape) * 4, "tensor payload");
        std::vector<float> data(numel(shape));
        for (auto& v : data) v = r.f32();
        nt.tensor = Tensor(std::move(shape), std::move(data));
        out.push_back(std::move(nt));
    }
    return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& blocks) {
    io::Writer w;
    auto bytes = encode_checkpoint(blocks);
    w.bytes(bytes.data(), bytes.size());
    w.write_file(path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    auto r = io::Reader::from_file(path);
    return decode_checkpoint(r);
}

inline std::vector<NamedTensor> model_blocks(Model& model) {
    std::vector<NamedTensor> out;
    model.for_each_parameter([&out](const std::string& name, Tensor& t) {
        out.push_back({name, Tensor(t.shape, t.data)});
    });
    return out;
}

/// Copy matching blocks into the model. Every model parameter must be
/// present with an identical shape; extra blocks are ignored.
inline void restore_model(Model& model, const std::vector<NamedTensor>& blocks) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& b : blocks) by_name[b.name] = &b.tensor;
    model.for_each_parameter([&by_name](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DimensionError("checkpoint lacks parameter '" + name + "'");
        if (it->second->shape != t.shape) {
            throw DimensionError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second->shape) +
                                 ", model expects " + shape_str(t.shape));
        }
        t.data = it->second->data;
    });
}

}  // namespace pmtrans
