#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "raydiff/grid.hpp"

namespace raydiff {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Image16 = Grid<std::uint16_t>;

/// Lossless 8-bit PNG (1 or 3 channels) to and from memory.
std::vector<std::uint8_t> encode_png(const Image8& image);
Image8 decode_png(const std::vector<std::uint8_t>& bytes);

void write_png(const std::string& path, const Image8& image);
void write_png16(const std::string& path, const Image16& image);
Image8 read_png(const std::string& path);

/// 16-bit grayscale preview: valid depths mapped linearly from [lo, hi] to [1, 65535], invalid
/// pixels written as 0.
Image16 depth_preview(const DepthMap& depth, float lo, float hi);

/// Raw f32 little-endian depth with an 8-byte header (u32 width, u32 height).
void write_depth_raw(const std::string& path, const DepthMap& depth);
DepthMap read_depth_raw(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace raydiff
