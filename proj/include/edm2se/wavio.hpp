#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "signal.hpp"

namespace edm2se {

namespace wav_detail {

inline void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, uint16_t v) {
    for (int i = 0; i < 2; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t get_u16(const unsigned char* p) {
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

} // namespace wav_detail

// Mono RIFF writer; format 1 (PCM 16-bit) or 3 (IEEE float32).
template <typename T>
void write_wav(const std::string& path, const WaveformT<T>& w, bool as_float = true) {
    using namespace wav_detail;
    const uint16_t fmt = as_float ? 3 : 1;
    const uint16_t bits = as_float ? 32 : 16;
    const uint32_t n = static_cast<uint32_t>(w.samples.size());
    const uint32_t data_bytes = n * (bits / 8);
    const uint32_t rate = static_cast<uint32_t>(w.sample_rate);

    std::string s;
    s.reserve(44 + data_bytes);
    s += "RIFF";
    put_u32(s, 36 + data_bytes);
    s += "WAVEfmt ";
    put_u32(s, 16);
    put_u16(s, fmt);
    put_u16(s, 1);
    put_u32(s, rate);
    put_u32(s, rate * (bits / 8));
    put_u16(s, static_cast<uint16_t>(bits / 8));
    put_u16(s, bits);
    s += "data";
    put_u32(s, data_bytes);
    if (as_float) {
        for (uint32_t i = 0; i < n; ++i) {
            const float v = static_cast<float>(w.samples[i]);
            uint32_t bitsv;
            std::memcpy(&bitsv, &v, 4);
            put_u32(s, bitsv);
        }
    } else {
        for (uint32_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(w.samples[i]);
            const long q = std::clamp(std::lround(v * 32768.0), -32768l, 32767l);
            put_u16(s, static_cast<uint16_t>(static_cast<int16_t>(q)));
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_wav: cannot open " + path);
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!out) throw std::runtime_error("write_wav: write failed for " + path);
}

template <typename T = float>
WaveformT<T> read_wav(const std::string& path) {
    using namespace wav_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_wav: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 44 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw std::runtime_error("read_wav: not a RIFF/WAVE file: " + path);

    uint16_t fmt = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    size_t data_off = 0, data_len = 0;
    size_t p = 12;
    while (p + 8 <= buf.size()) {
        const uint32_t sz = get_u32(buf.data() + p + 4);
        if (std::memcmp(buf.data() + p, "fmt ", 4) == 0 && p + 8 + 16 <= buf.size()) {
            fmt = get_u16(buf.data() + p + 8);
            channels = get_u16(buf.data() + p + 10);
            rate = get_u32(buf.data() + p + 12);
            bits = get_u16(buf.data() + p + 22);
        } else if (std::memcmp(buf.data() + p, "data", 4) == 0) {
            data_off = p + 8;
            data_len = std::min<size_t>(sz, buf.size() - data_off);
        }
        p += 8 + sz + (sz & 1);
    }
    if (data_off == 0) throw std::runtime_error("read_wav: missing data chunk: " + path);
    if (channels != 1) throw std::runtime_error("read_wav: only mono supported: " + path);

    WaveformT<T> w;
    w.sample_rate = static_cast<int>(rate);
    if (fmt == 1 && bits == 16) {
        const size_t n = data_len / 2;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const int16_t q = static_cast<int16_t>(get_u16(buf.data() + data_off + 2 * i));
            w.samples[i] = static_cast<T>(q / 32768.0);
        }
    } else if (fmt == 3 && bits == 32) {
        const size_t n = data_len / 4;
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const uint32_t bitsv = get_u32(buf.data() + data_off + 4 * i);
            float v;
            std::memcpy(&v, &bitsv, 4);
            w.samples[i] = static_cast<T>(v);
        }
    } else {
        throw std::runtime_error("read_wav: unsupported format (want PCM16 or float32 mono): " + path);
    }
    return w;
}

} // namespace edm2se
