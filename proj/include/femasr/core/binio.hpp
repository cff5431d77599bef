// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace femasr::binio {

// Explicit little-endian encoding, independent of host byte order.

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::ostream& os, double f) { put_u64(os, std::bit_cast<std::uint64_t>(f)); }

inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw std::runtime_error(std::string("truncated input while reading ") + what);
}

inline std::uint32_t get_u32(std::istream& is, const char* what = "u32") {
    unsigned char b[4];
    read_exact(is, reinterpret_cast<char*>(b), 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what = "u64") {
    unsigned char b[8];
    read_exact(is, reinterpret_cast<char*>(b), 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline float get_f32(std::istream& is, const char* what = "f32") { return std::bit_cast<float>(get_u32(is, what)); }
inline double get_f64(std::istream& is, const char* what = "f64") { return std::bit_cast<double>(get_u64(is, what)); }

inline std::string get_str(std::istream& is, std::size_t max_len = 1 << 20, const char* what = "string") {
    const auto n = get_u32(is, what);
    if (n > max_len) throw std::runtime_error(std::string("implausible length while reading ") + what);
    std::string s(n, '\0');
    read_exact(is, s.data(), n, what);
    return s;
}

/// 64-bit FNV-1a, used for config digests and parameter hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace femasr::binio
