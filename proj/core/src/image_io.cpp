// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#include "draction/image_io.hpp"

#include "draction/errors.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace draction {

namespace {

void append_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
    append_u32_be(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    append_u32_be(out, crc);
}

} // namespace

void write_png(const std::string& path, int width, int height,
               const std::vector<uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3) {
        throw ValidationError("pixel buffer size does not match dimensions");
    }

    // Raw scanlines, filter byte 0 per row.
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height) * (static_cast<size_t>(width) * 3 + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        const uint8_t* row = rgb.data() + static_cast<size_t>(y) * width * 3;
        raw.insert(raw.end(), row, row + static_cast<size_t>(width) * 3);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  6) != Z_OK) {
        throw IoError("zlib compression failed");
    }
    compressed.resize(bound);

    std::vector<uint8_t> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<uint8_t> ihdr;
    append_u32_be(ihdr, static_cast<uint32_t>(width));
    append_u32_be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(2); // color type: truecolor
    ihdr.push_back(0); // compression
    ihdr.push_back(0); // filter
    ihdr.push_back(0); // interlace
    append_chunk(png, "IHDR", ihdr);
    append_chunk(png, "IDAT", compressed);
    append_chunk(png, "IEND", {});

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.write(reinterpret_cast<const char*>(png.data()),
              static_cast<std::streamsize>(png.size()));
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

namespace {

template <typename T>
std::vector<uint8_t> quantize_impl(const std::vector<T>& rgb) {
    std::vector<uint8_t> out(rgb.size());
    for (size_t i = 0; i < rgb.size(); ++i) {
        const T clamped = std::min(T(1), std::max(T(0), rgb[i]));
        out[i] = static_cast<uint8_t>(std::floor(clamped * T(255) + T(0.5)));
    }
    return out;
}

} // namespace

std::vector<uint8_t> quantize_rgb(const std::vector<float>& rgb) {
    return quantize_impl(rgb);
}

std::vector<uint8_t> quantize_rgb(const std::vector<double>& rgb) {
    return quantize_impl(rgb);
}

void write_npy_hwc(const std::string& path, int width, int height,
                   const std::vector<float>& data) {
    if (data.size() != static_cast<size_t>(width) * height * 3) {
        throw ValidationError("float buffer size does not match dimensions");
    }
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" +
                         std::to_string(height) + ", " + std::to_string(width) +
                         ", 3), }";
    const size_t unpadded = 10 + header.size() + 1;
    const size_t padding = (64 - unpadded % 64) % 64;
    header.append(padding, ' ');
    header.push_back('\n');

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    const uint8_t magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
    out.write(reinterpret_cast<const char*>(magic), 8);
    const uint16_t hlen = static_cast<uint16_t>(header.size());
    out.put(static_cast<char>(hlen & 0xff));
    out.put(static_cast<char>(hlen >> 8));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

} // namespace draction
