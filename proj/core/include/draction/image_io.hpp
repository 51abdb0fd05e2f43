// Copyright Contributors to the draction project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace draction {

/// Writes an 8-bit RGB PNG (no filtering, fixed zlib level) so identical
/// pixels produce identical bytes.
void write_png(const std::string& path, int width, int height,
               const std::vector<uint8_t>& rgb);

/// Quantizes [0,1] float channels to 8-bit with round-half-up.
std::vector<uint8_t> quantize_rgb(const std::vector<float>& rgb);
std::vector<uint8_t> quantize_rgb(const std::vector<double>& rgb);

/// Writes a little-endian float32 NPY array of shape (height, width, 3).
void write_npy_hwc(const std::string& path, int width, int height,
                   const std::vector<float>& data);

} // namespace draction
