#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>

#include "ptl/cells.hpp"

namespace ptl {

struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Container layout (all integers little-endian):
//   magic "BCNV1\0"
//   u32 format version (1)
//   u32 config length, config bytes (the run config echoed verbatim)
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u8 dtype (0=f32, 1=f64),
//               u32 rank, u32 extents...
//   payload: raw values in manifest order
//   u64 FNV-1a checksum of the payload bytes
namespace ckpt {

constexpr char kMagic[6] = {'B', 'C', 'N', 'V', '1', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

inline std::uint64_t fnv1a(const unsigned char* data, std::size_t n) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

template <typename T>
void put(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

struct Reader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;
    template <typename T>
    T get() {
        if (pos + sizeof(T) > n) throw LoadError("checkpoint: truncated file");
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += sizeof(T);
        return static_cast<T>(v);
    }
    std::string get_string(std::size_t len) {
        if (pos + len > n) throw LoadError("checkpoint: truncated file");
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
};

}  // namespace ckpt

struct TensorEntry {
    std::string name;
    int dtype = 0;  // 0=f32, 1=f64
    std::vector<int> shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string config_text;
    std::vector<TensorEntry> tensors;
};

template <typename S>
std::string checkpoint_bytes(const std::string& config_text,
                             const std::vector<ParamRef<S>>& params) {
    std::string out(ckpt::kMagic, sizeof(ckpt::kMagic));
    ckpt::put<std::uint32_t>(out, ckpt::kFormatVersion);
    ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(config_text.size()));
    out += config_text;
    ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        out.push_back(static_cast<char>(std::is_same_v<S, double> ? 1 : 0));
        ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor->shape.size()));
        for (int e : p.tensor->shape) ckpt::put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    const std::size_t payload_start = out.size();
    for (const auto& p : params)
        for (S v : p.tensor->data) {
            if constexpr (std::is_same_v<S, double>) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                ckpt::put<std::uint64_t>(out, bits);
            } else {
                std::uint32_t bits;
                std::memcpy(&bits, &v, 4);
                ckpt::put<std::uint32_t>(out, bits);
            }
        }
    const std::uint64_t checksum = ckpt::fnv1a(
        reinterpret_cast<const unsigned char*>(out.data()) + payload_start,
        out.size() - payload_start);
    ckpt::put<std::uint64_t>(out, checksum);
    return out;
}

// Write to a temp file, then atomic rename; a torn write never leaves a
// partial checkpoint at the target path.
template <typename S>
void checkpoint_save(const std::string& path, const std::string& config_text,
                     const std::vector<ParamRef<S>>& params) {
    const std::string bytes = checkpoint_bytes(config_text, params);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("checkpoint: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("checkpoint: cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ckpt::Reader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()};
    if (bytes.size() < sizeof(ckpt::kMagic) ||
        std::memcmp(bytes.data(), ckpt::kMagic, sizeof(ckpt::kMagic)) != 0)
        throw LoadError("checkpoint: bad magic in " + path);
    r.pos = sizeof(ckpt::kMagic);
    const auto version = r.get<std::uint32_t>();
    if (version != ckpt::kFormatVersion)
        throw LoadError("checkpoint: unsupported format version " + std::to_string(version));
    Checkpoint ck;
    ck.config_text = r.get_string(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    std::size_t payload_values = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorEntry e;
        e.name = r.get_string(r.get<std::uint32_t>());
        e.dtype = r.get<std::uint8_t>();
        if (e.dtype != 0 && e.dtype != 1)
            throw LoadError("checkpoint: tensor '" + e.name + "' has unknown dtype");
        const auto rank = r.get<std::uint32_t>();
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            e.shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
            numel *= e.shape.back();
        }
        payload_values += static_cast<std::size_t>(numel);
        ck.tensors.push_back(std::move(e));
    }
    const std::size_t payload_start = r.pos;
    std::size_t payload_bytes = 0;
    for (const auto& e : ck.tensors)
        payload_bytes += static_cast<std::size_t>(Tensor<double>::count(e.shape)) *
                         (e.dtype == 1 ? 8 : 4);
    if (payload_start + payload_bytes + 8 != bytes.size())
        throw LoadError("checkpoint: manifest shapes do not match payload length in " + path);
    const std::uint64_t stored_sum =
        [&] { ckpt::Reader rr = r; rr.pos = payload_start + payload_bytes; return rr.get<std::uint64_t>(); }();
    const std::uint64_t actual_sum = ckpt::fnv1a(
        reinterpret_cast<const unsigned char*>(bytes.data()) + payload_start, payload_bytes);
    if (stored_sum != actual_sum)
        throw LoadError("checkpoint: checksum mismatch in " + path + ", refusing to load");
    for (auto& e : ck.tensors) {
        const std::int64_t numel = Tensor<double>::count(e.shape);
        e.values.resize(static_cast<std::size_t>(numel));
        for (std::int64_t j = 0; j < numel; ++j) {
            if (e.dtype == 1) {
                const std::uint64_t bits = r.get<std::uint64_t>();
                double v;
                std::memcpy(&v, &bits, 8);
                e.values[static_cast<std::size_t>(j)] = v;
            } else {
                const std::uint32_t bits = r.get<std::uint32_t>();
                float v;
                std::memcpy(&v, &bits, 4);
                e.values[static_cast<std::size_t>(j)] = v;
            }
        }
    }
    return ck;
}

// Copies checkpoint values into the parameter set; the manifest must match
// the parameter list name-for-name and shape-for-shape.
template <typename S>
void checkpoint_apply(const Checkpoint& ck, const std::vector<ParamRef<S>>& params) {
    std::vector<std::string> mismatches;
    if (ck.tensors.size() != params.size())
        mismatches.push_back("tensor count " + std::to_string(ck.tensors.size()) + " vs " +
                             std::to_string(params.size()));
    for (std::size_t i = 0; i < std::min(ck.tensors.size(), params.size()); ++i) {
        const auto& e = ck.tensors[i];
        const auto& p = params[i];
        if (e.name != p.name)
            mismatches.push_back("name '" + e.name + "' vs '" + p.name + "'");
        else if (e.shape != p.tensor->shape)
            mismatches.push_back("'" + e.name + "': " + Tensor<S>::shape_str(e.shape) + " vs " +
                                 p.tensor->shape_str());
    }
    if (!mismatches.empty()) {
        std::string msg = "checkpoint: topology mismatch:";
        for (const auto& m : mismatches) msg += "\n  " + m;
        throw LoadError(msg);
    }
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < ck.tensors[i].values.size(); ++j)
            params[i].tensor->data[j] = static_cast<S>(ck.tensors[i].values[j]);
}

}  // namespace ptl
