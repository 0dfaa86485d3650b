#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "petal/errors.hpp"
#include "petal/tensor.hpp"

// Adapter-only binary checkpoints. Layout: magic "PETL", format version u32,
// tensor count u32, then per tensor: name length u16 + UTF-8 bytes, dtype u8
// (0 f32, 1 f64), rank u8, dims as u64 each, payload row-major. All integers
// and payload words little-endian regardless of host; a CRC32 of everything
// before it closes the file. Backbone weights never enter a checkpoint.

namespace petal {

inline std::uint32_t crc32_ieee(const unsigned char* data, std::size_t len,
                                std::uint32_t seed = 0) {
    static const auto table = [] {
        std::vector<std::uint32_t> t(256);
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const unsigned char* p;
    std::size_t n, pos = 0;

    void need(std::size_t k) const {
        if (pos + k > n) throw FormatError("checkpoint record overruns the file");
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

template <typename T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "checkpoints carry f32 or f64");
    return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void save_adapter(const NamedTensors<T>& state, const std::string& path) {
    if (state.empty()) throw ContractError("refusing to write an empty checkpoint");
    std::set<std::string> seen;
    for (const auto& [name, t] : state) {
        if (!seen.insert(name).second) throw ContractError("duplicate tensor name " + name);
        (void)t;
    }

    std::string buf;
    buf += "PETL";
    detail::put_u32(buf, 1u);
    detail::put_u32(buf, static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, t] : state) {
        if (name.size() > 0xffff) throw ContractError("tensor name too long: " + name);
        detail::put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        buf.push_back(static_cast<char>(detail::dtype_code<T>()));
        buf.push_back(static_cast<char>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d) detail::put_u64(buf, t.dim(d));
        for (const T v : t.values()) {
            if constexpr (std::is_same_v<T, float>) {
                std::uint32_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                detail::put_u32(buf, bits);
            } else {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                detail::put_u64(buf, bits);
            }
        }
    }
    detail::put_u32(buf, crc32_ieee(reinterpret_cast<const unsigned char*>(buf.data()),
                                    buf.size()));

    const std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    const bool wrote = std::fwrite(buf.data(), 1, buf.size(), f) == buf.size();
    const bool closed = std::fclose(f) == 0;
    if (!wrote || !closed) {
        std::remove(tmp.c_str());
        throw IoError("failed writing " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("cannot move checkpoint into place at " + path);
    }
}

// Fills the destination tensors in place; the destination defines which
// names, shapes, and dtype the checkpoint must carry, bit-exactly.
template <typename T>
void load_adapter(NamedTensors<T>& dest, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open " + path);
    std::string buf;
    char chunk[65536];
    std::size_t got;
    while ((got = std::fread(chunk, 1, sizeof(chunk), f)) > 0) buf.append(chunk, got);
    std::fclose(f);

    if (buf.size() < 16) throw FormatError("checkpoint too small to hold a header");
    const auto* bytes = reinterpret_cast<const unsigned char*>(buf.data());
    const std::size_t body = buf.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
    if (crc32_ieee(bytes, body) != stored) {
        throw CorruptionError("checkpoint CRC mismatch in " + path);
    }

    detail::ByteReader r{bytes, body};
    if (r.bytes(4) != "PETL") throw FormatError("bad checkpoint magic in " + path);
    if (const auto ver = r.u32(); ver != 1) {
        throw FormatError("unsupported checkpoint version " + std::to_string(ver));
    }
    const std::uint32_t count = r.u32();
    if (count != dest.size()) {
        throw IncompatibilityError("checkpoint holds " + std::to_string(count) +
                                   " tensors, expected " + std::to_string(dest.size()));
    }

    std::set<std::string> filled;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.u16());
        const std::uint8_t dtype = static_cast<std::uint8_t>(r.bytes(1)[0]);
        const std::uint8_t rank = static_cast<std::uint8_t>(r.bytes(1)[0]);
        Shape dims(rank);
        for (auto& d : dims) d = r.u64();

        Tensor<T>* target = nullptr;
        for (auto& [dname, t] : dest) {
            if (dname == name) {
                target = &t;
                break;
            }
        }
        if (!target) throw IncompatibilityError("unexpected checkpoint tensor " + name);
        if (!filled.insert(name).second) throw FormatError("duplicate checkpoint tensor " + name);
        if (dtype != detail::dtype_code<T>()) {
            throw IncompatibilityError("dtype mismatch for tensor " + name);
        }
        if (dims != target->shape()) {
            throw IncompatibilityError("dimension mismatch for tensor " + name);
        }
        for (auto& slot : target->values()) {
            if constexpr (std::is_same_v<T, float>) {
                const std::uint32_t v = r.u32();
                std::memcpy(&slot, &v, sizeof(slot));
            } else {
                const std::uint64_t v = r.u64();
                std::memcpy(&slot, &v, sizeof(slot));
            }
        }
    }
    if (r.pos != body) throw FormatError("trailing bytes after the last checkpoint record");
}

}  // namespace petal
