#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "m4/nn.hpp"

namespace m4 {

// Binary checkpoint layout (little endian):
//   magic "M4CK", version u32, entry count u32, then per entry:
//   name length u16, name bytes, dtype u8, rank u8, dims u32 each, raw values.
// Entries are sorted by name, so save -> load -> save is byte identical.

enum : uint8_t { kDtypeF32 = 0, kDtypeF64 = 1, kDtypeU8 = 2, kDtypeI64 = 3 };

struct RawEntry {
    uint8_t dtype = kDtypeF32;
    Shape dims;
    std::vector<uint8_t> bytes;

    long long numel() const { return shape_numel(dims); }
};

using CheckpointMap = std::map<std::string, RawEntry>;

namespace ckpt_detail {

constexpr uint32_t kVersion = 1;
constexpr char kMagic[4] = {'M', '4', 'C', 'K'};

inline size_t dtype_size(uint8_t d) {
    switch (d) {
        case kDtypeF32: return 4;
        case kDtypeF64: return 8;
        case kDtypeU8: return 1;
        case kDtypeI64: return 8;
        default: throw DataError("checkpoint: unknown dtype code " + std::to_string(d));
    }
}

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("checkpoint: truncated file " + path);
    return v;
}

}  // namespace ckpt_detail

template <class S>
RawEntry raw_from_tensor(const Tensor<S>& t) {
    RawEntry e;
    e.dtype = sizeof(S) == 4 ? kDtypeF32 : kDtypeF64;
    e.dims = t.shape();
    e.bytes.resize(static_cast<size_t>(t.numel()) * sizeof(S));
    std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
    return e;
}

template <class S>
RawEntry raw_from_values(const Shape& dims, const std::vector<S>& v) {
    RawEntry e;
    e.dtype = sizeof(S) == 4 ? kDtypeF32 : kDtypeF64;
    e.dims = dims;
    e.bytes.resize(v.size() * sizeof(S));
    std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
    return e;
}

inline RawEntry raw_from_text(const std::string& text) {
    RawEntry e;
    e.dtype = kDtypeU8;
    e.dims = {static_cast<int>(text.size())};
    e.bytes.assign(text.begin(), text.end());
    return e;
}

inline RawEntry raw_from_i64(long long v) {
    RawEntry e;
    e.dtype = kDtypeI64;
    e.dims = {1};
    e.bytes.resize(8);
    std::memcpy(e.bytes.data(), &v, 8);
    return e;
}

inline void save_checkpoint(const std::string& path, const CheckpointMap& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write " + path);
    out.write(ckpt_detail::kMagic, 4);
    ckpt_detail::put<uint32_t>(out, ckpt_detail::kVersion);
    ckpt_detail::put<uint32_t>(out, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, e] : entries) {
        if (name.size() > 0xffff) throw DataError("checkpoint: name too long: " + name);
        ckpt_detail::put<uint16_t>(out, static_cast<uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckpt_detail::put<uint8_t>(out, e.dtype);
        ckpt_detail::put<uint8_t>(out, static_cast<uint8_t>(e.dims.size()));
        for (int d : e.dims) ckpt_detail::put<uint32_t>(out, static_cast<uint32_t>(d));
        const size_t want = static_cast<size_t>(e.numel()) * ckpt_detail::dtype_size(e.dtype);
        if (want != e.bytes.size()) {
            throw DataError("checkpoint: entry " + name + " payload size mismatch");
        }
        out.write(reinterpret_cast<const char*>(e.bytes.data()),
                  static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw DataError("checkpoint: short write to " + path);
}

inline CheckpointMap load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, ckpt_detail::kMagic, 4) != 0) {
        throw DataError("checkpoint: bad magic in " + path);
    }
    const auto version = ckpt_detail::take<uint32_t>(in, path);
    if (version != ckpt_detail::kVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = ckpt_detail::take<uint32_t>(in, path);
    CheckpointMap entries;
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = ckpt_detail::take<uint16_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        RawEntry e;
        e.dtype = ckpt_detail::take<uint8_t>(in, path);
        const auto rank = ckpt_detail::take<uint8_t>(in, path);
        for (int d = 0; d < rank; ++d) {
            e.dims.push_back(static_cast<int>(ckpt_detail::take<uint32_t>(in, path)));
        }
        e.bytes.resize(static_cast<size_t>(e.numel()) * ckpt_detail::dtype_size(e.dtype));
        in.read(reinterpret_cast<char*>(e.bytes.data()),
                static_cast<std::streamsize>(e.bytes.size()));
        if (!in) throw DataError("checkpoint: truncated payload in " + path);
        entries.emplace(std::move(name), std::move(e));
    }
    return entries;
}

// ---------------------------------------------------------------------------
// registry <-> checkpoint
// ---------------------------------------------------------------------------

template <class S>
void collect_params(const ParamRegistry<S>& reg, CheckpointMap& out) {
    for (const auto& e : reg.entries()) {
        out.emplace(e.name, raw_from_tensor(e.tensor));
    }
}

// Loads parameter entries into an identically-configured registry; every
// registry tensor must be present with matching dtype and shape.
template <class S>
void apply_params(const CheckpointMap& ck, ParamRegistry<S>& reg) {
    for (const auto& e : reg.entries()) {
        auto it = ck.find(e.name);
        if (it == ck.end()) {
            throw DataError("checkpoint: missing parameter " + e.name);
        }
        const auto& raw = it->second;
        const uint8_t want = sizeof(S) == 4 ? kDtypeF32 : kDtypeF64;
        if (raw.dtype != want || raw.dims != e.tensor.shape()) {
            throw DataError("checkpoint: parameter " + e.name + " has shape/dtype mismatch");
        }
        Tensor<S> t = e.tensor;  // shared storage; fill in place
        std::memcpy(t.data().data(), raw.bytes.data(), raw.bytes.size());
    }
}

inline std::string text_entry(const CheckpointMap& ck, const std::string& name) {
    auto it = ck.find(name);
    if (it == ck.end() || it->second.dtype != kDtypeU8) {
        throw DataError("checkpoint: missing text entry " + name);
    }
    return std::string(it->second.bytes.begin(), it->second.bytes.end());
}

inline long long i64_entry(const CheckpointMap& ck, const std::string& name) {
    auto it = ck.find(name);
    if (it == ck.end() || it->second.dtype != kDtypeI64) {
        throw DataError("checkpoint: missing counter entry " + name);
    }
    long long v;
    std::memcpy(&v, it->second.bytes.data(), 8);
    return v;
}

}  // namespace m4
