#pragma once

// Parameter blob format: magic "EDM2SE01", little-endian throughout,
// u32 tensor count, then per tensor u16 name length, name bytes, u8 ndim,
// u32 extents, float32 payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace edm2se {

struct NamedTensor {
    std::string name;
    TensorT<float> value;
};

namespace blob_detail {

inline void put_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename U>
void put_le(std::ostream& out, U v) {
    unsigned char b[sizeof(U)];
    for (size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
    put_bytes(out, b, sizeof(U));
}

inline void put_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(out, bits);
}

template <typename U>
U get_le(std::istream& in) {
    unsigned char b[sizeof(U)];
    in.read(reinterpret_cast<char*>(b), sizeof(U));
    if (!in) throw std::runtime_error("blob: truncated file");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return static_cast<U>(v);
}

inline float get_f32(std::istream& in) {
    const uint32_t bits = get_le<uint32_t>(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace blob_detail

inline void write_blob(const std::string& path, const std::vector<NamedTensor>& tensors) {
    using namespace blob_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_blob: cannot open " + path);
    out.write("EDM2SE01", 8);
    put_le<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > 0xffff) throw std::invalid_argument("write_blob: name too long");
        put_le<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
        put_bytes(out, t.name.data(), t.name.size());
        if (t.value.ndim() > 0xff) throw std::invalid_argument("write_blob: too many dims");
        put_le<uint8_t>(out, static_cast<uint8_t>(t.value.ndim()));
        for (int d = 0; d < t.value.ndim(); ++d) put_le<uint32_t>(out, static_cast<uint32_t>(t.value.dim(d)));
        for (size_t i = 0; i < t.value.numel(); ++i) put_f32(out, t.value[i]);
    }
    if (!out) throw std::runtime_error("write_blob: write failed for " + path);
}

inline std::vector<NamedTensor> read_blob(const std::string& path) {
    using namespace blob_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_blob: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "EDM2SE01", 8) != 0)
        throw std::runtime_error("read_blob: bad magic in " + path);
    const uint32_t count = get_le<uint32_t>(in);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t k = 0; k < count; ++k) {
        const uint16_t nlen = get_le<uint16_t>(in);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        if (!in) throw std::runtime_error("read_blob: truncated name in " + path);
        const uint8_t nd = get_le<uint8_t>(in);
        std::vector<int> dims(nd);
        for (uint8_t d = 0; d < nd; ++d) dims[d] = static_cast<int>(get_le<uint32_t>(in));
        TensorT<float> t(dims);
        for (size_t i = 0; i < t.numel(); ++i) t[i] = get_f32(in);
        out.push_back({std::move(name), std::move(t)});
    }
    return out;
}

inline const NamedTensor* find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
    for (const auto& t : ts)
        if (t.name == name) return &t;
    return nullptr;
}

inline double meta_scalar(const std::vector<NamedTensor>& ts, const std::string& name) {
    const auto* t = find_tensor(ts, name);
    if (!t || t->value.numel() != 1) throw std::runtime_error("blob: missing meta scalar " + name);
    return static_cast<double>(t->value[0]);
}

inline NamedTensor make_meta(const std::string& name, double v) {
    TensorT<float> t({1});
    t[0] = static_cast<float>(v);
    return {name, std::move(t)};
}

} // namespace edm2se
