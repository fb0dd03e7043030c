#include "raydiff/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace raydiff {

namespace {

png_uint_32 format_for(int channels) {
    if (channels == 1) return PNG_FORMAT_GRAY;
    if (channels == 3) return PNG_FORMAT_RGB;
    throw ImageIoError("png: only 1- or 3-channel images are supported");
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image8& image) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = format_for(image.channels);
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.data.data(), 0, nullptr))
        throw ImageIoError(std::string("png encode: ") + img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.data.data(), 0, nullptr))
        throw ImageIoError(std::string("png encode: ") + img.message);
    out.resize(size);
    return out;
}

Image8 decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw ImageIoError(std::string("png decode: ") + img.message);
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    Image8 out(static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3);
    if (!png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr)) {
        png_image_free(&img);
        throw ImageIoError(std::string("png decode: ") + img.message);
    }
    return out;
}

void write_png(const std::string& path, const Image8& image) { write_file(path, encode_png(image)); }

void write_png16(const std::string& path, const Image16& image) {
    if (image.channels != 1) throw ImageIoError("png16: only grayscale is supported");
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_LINEAR_Y;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.data.data(), 0, nullptr))
        throw ImageIoError(std::string("png16 write ") + path + ": " + img.message);
}

Image8 read_png(const std::string& path) { return decode_png(read_file(path)); }

Image16 depth_preview(const DepthMap& depth, float lo, float hi) {
    Image16 out(depth.width, depth.height, 1, 0);
    const float span = hi > lo ? hi - lo : 1.0f;
    for (std::size_t i = 0; i < depth.pixels(); ++i) {
        const float d = depth.data[i];
        if (!valid_depth(d)) continue;
        const float x = std::clamp((d - lo) / span, 0.0f, 1.0f);
        out.data[i] = static_cast<std::uint16_t>(1 + std::lround(x * 65534.0f));
    }
    return out;
}

void write_depth_raw(const std::string& path, const DepthMap& depth) {
    static_assert(std::endian::native == std::endian::little, "raw depth writer assumes little-endian host");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ImageIoError("cannot open " + path);
    const std::uint32_t hdr[2] = {static_cast<std::uint32_t>(depth.width), static_cast<std::uint32_t>(depth.height)};
    os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    os.write(reinterpret_cast<const char*>(depth.data.data()), depth.data.size() * sizeof(float));
    if (!os) throw ImageIoError("write failed for " + path);
}

DepthMap read_depth_raw(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 8) throw ImageIoError("truncated depth file " + path);
    std::uint32_t hdr[2];
    std::memcpy(hdr, bytes.data(), sizeof hdr);
    DepthMap d(static_cast<int>(hdr[0]), static_cast<int>(hdr[1]));
    if (bytes.size() != 8 + d.data.size() * sizeof(float)) throw ImageIoError("depth file size mismatch " + path);
    std::memcpy(d.data.data(), bytes.data() + 8, d.data.size() * sizeof(float));
    return d;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ImageIoError("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ImageIoError("cannot open " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ImageIoError("write failed for " + path);
}

}  // namespace raydiff
