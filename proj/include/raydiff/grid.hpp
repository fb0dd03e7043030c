#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace raydiff {

/// Dense interleaved H×W×C raster, row-major, pixel (x, y) at data[(y*W + x)*C].
template <class T>
struct Grid {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<T> data;

    Grid() = default;
    Grid(int w, int h, int c = 1, T fill = T{})
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
        if (w < 0 || h < 0 || c <= 0) throw std::invalid_argument("Grid: negative dimensions");
    }

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    std::size_t index(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    T& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    const T& at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

    bool same_shape(const Grid& other) const {
        return width == other.width && height == other.height && channels == other.channels;
    }
    template <class U>
    bool same_extent(const Grid<U>& other) const {
        return width == other.width && height == other.height;
    }
    bool operator==(const Grid&) const = default;
};

using ImageF = Grid<float>;     // RGB, 3 channels, [0,1]
using Image8 = Grid<std::uint8_t>;
using DepthMap = Grid<float>;   // z-depth, NaN (or <= 0) marks invalid pixels
using Mask = Grid<std::uint8_t>;

inline bool valid_depth(float d) { return d == d && d > 0.0f && d < 1e30f; }

inline Mask depth_validity(const DepthMap& depth) {
    Mask m(depth.width, depth.height, 1, 0);
    for (std::size_t i = 0; i < depth.pixels(); ++i) m.data[i] = valid_depth(depth.data[i]) ? 1 : 0;
    return m;
}

inline ImageF to_float(const Image8& img) {
    ImageF out(img.width, img.height, img.channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = img.data[i] / 255.0f;
    return out;
}

inline Image8 to_bytes(const ImageF& img) {
    Image8 out(img.width, img.height, img.channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        float v = img.data[i];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        out.data[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
    }
    return out;
}

}  // namespace raydiff
