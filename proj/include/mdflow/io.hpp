#pragma once

#include "mdflow/common.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace mdflow {

inline uint32_t crc32_bytes(const void* data, size_t n, uint32_t seed = 0) {
    return uint32_t(::crc32(seed, static_cast<const Bytef*>(data), uInt(n)));
}

// All container formats are little-endian; refuse to run elsewhere.
inline void check_little_endian() {
    const uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    if (b != 1) throw IoError("this build only supports little-endian hosts");
}

inline void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw IoError("unexpected end of file (u32)");
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw IoError("unexpected end of file (u64)");
    return v;
}

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
}
inline void read_bytes(std::istream& is, void* p, size_t n) {
    is.read(static_cast<char*>(p), std::streamsize(n));
    if (!is) throw IoError("unexpected end of file (payload)");
}

// Binary P6 image. Values are mapped from [-1, 1] to [0, 255].
template <typename T>
void write_ppm(const std::string& path, const Grid<T>& img) {
    if (img.c != 3) throw ConfigError("write_ppm: grid must have 3 channels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(size_t(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double u = (double(img.at(y, x, ch)) + 1.0) * 0.5;
                int b = int(std::lround(u * 255.0));
                row[size_t(x) * 3 + ch] = (unsigned char)(b < 0 ? 0 : (b > 255 ? 255 : b));
            }
        write_bytes(os, row.data(), row.size());
    }
    if (!os) throw IoError("short write: " + path);
}

// Single-channel grids are replicated to gray, palette grids written as-is.
template <typename T>
void write_grid_ppm(const std::string& path, const Grid<T>& g) {
    if (g.c == 3) {
        write_ppm(path, g);
        return;
    }
    if (g.c != 1) throw ConfigError("write_grid_ppm: expected 1 or 3 channels");
    Grid<T> rgb(g.h, g.w, 3);
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
            for (int ch = 0; ch < 3; ++ch) rgb.at(y, x, ch) = g.at(y, x, 0);
    write_ppm(path, rgb);
}

inline void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

}  // namespace mdflow
