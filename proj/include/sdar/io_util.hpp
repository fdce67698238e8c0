#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sdar/matrix.hpp"

namespace sdar {

// All on-disk integers and floats are little-endian regardless of host.

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    SDAR_CHECK(os.good(), "write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    SDAR_CHECK(static_cast<size_t>(is.gcount()) == n, "truncated file while reading " + what);
}

inline void write_u16_le(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    write_bytes(os, b, 2);
}

inline uint16_t read_u16_le(std::istream& is, const std::string& what = "u16") {
    unsigned char b[2];
    read_bytes(is, b, 2, what);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline void write_u32_le(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(os, b, 4);
}

inline uint32_t read_u32_le(std::istream& is, const std::string& what = "u32") {
    unsigned char b[4];
    read_bytes(is, b, 4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f32_le(std::ostream& os, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32_le(os, bits);
}

inline float read_f32_le(std::istream& is, const std::string& what = "f32") {
    const uint32_t bits = read_u32_le(is, what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

inline void write_magic(std::ostream& os, const char tag[5]) { write_bytes(os, tag, 4); }

inline void expect_magic(std::istream& is, const char tag[5], const std::string& what) {
    char got[5] = {0, 0, 0, 0, 0};
    read_bytes(is, got, 4, what + " magic");
    SDAR_CHECK(std::memcmp(got, tag, 4) == 0,
               what + ": bad magic, expected \"" + tag + "\" got \"" + got + "\"");
}

inline void expect_version(std::istream& is, uint32_t version, const std::string& what) {
    const uint32_t got = read_u32_le(is, what + " version");
    SDAR_CHECK(got == version,
               what + ": unsupported version " + std::to_string(got) + ", expected " +
                   std::to_string(version));
}

/// Writes a whole f64 matrix as f32 payload, row-major.
inline void write_matrix_f32(std::ostream& os, const Matrix& m) {
    for (double v : m.data) write_f32_le(os, static_cast<float>(v));
}

inline void read_matrix_f32(std::istream& is, Matrix& m, const std::string& what) {
    for (double& v : m.data) v = static_cast<double>(read_f32_le(is, what));
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    SDAR_CHECK(os.is_open(), "cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    SDAR_CHECK(is.is_open(), "cannot open for reading: " + path);
    return is;
}

inline void expect_eof(std::istream& is, const std::string& what) {
    SDAR_CHECK(is.peek() == std::char_traits<char>::eof(), what + ": trailing bytes");
}

/// FNV-1a 64-bit hash, used to fingerprint written artifacts.
inline uint64_t fnv1a(std::span<const unsigned char> bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    SDAR_CHECK(is.is_open(), "cannot hash missing file: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    return fnv1a(buf);
}

inline bool file_exists(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return is.is_open();
}

}  // namespace sdar
