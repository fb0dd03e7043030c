#include "raydiff/codec.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <limits>

namespace raydiff {

TaskId parse_task(const std::string& name) {
    if (name == "rgb") return TaskId::Rgb;
    if (name == "depth") return TaskId::Depth;
    throw CodecError("unknown task '" + name + "' (expected rgb or depth)");
}

ImageF encode_rgb(const ImageF& image, RangePolicy policy) {
    ImageF out = image;
    bool clamped = false;
    for (float& v : out.data) {
        if (!(v >= 0.0f && v <= 1.0f)) {
            if (policy == RangePolicy::Reject) throw CodecError("encode_rgb: intensity outside [0,1]");
            v = std::clamp(v == v ? v : 0.0f, 0.0f, 1.0f);
            clamped = true;
        }
        v = 2.0f * v - 1.0f;
    }
    if (clamped) spdlog::warn("encode_rgb: clamped out-of-range intensities");
    return out;
}

ImageF decode_rgb(const ImageF& state) {
    ImageF out = state;
    for (float& v : out.data) v = 0.5f * (v + 1.0f);
    return out;
}

double encode_depth_value(double depth, double scale, const DepthRange& range) {
    return 2.0 * (std::log(depth / (scale * range.d_min)) / range.log_span()) - 1.0;
}

double decode_depth_value(double state, double scale, const DepthRange& range) {
    return scale * range.d_min * std::exp(0.5 * (state + 1.0) * range.log_span());
}

DepthMap encode_depth(const DepthMap& depth, double scale, const DepthRange& range,
                      const Mask* mask) {
    range.validate();
    if (!(scale > 0.0)) throw CodecError("encode_depth: scale must be positive");
    if (mask && !mask->same_extent(depth)) throw CodecError("encode_depth: mask shape mismatch");
    DepthMap out = depth;
    const double lo = scale * range.d_min;
    const double hi = scale * range.d_max;
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
        const float d = depth.data[i];
        const bool flagged = mask ? mask->data[i] != 0 : valid_depth(d);
        if (!flagged) {
            out.data[i] = std::numeric_limits<float>::quiet_NaN();
            continue;
        }
        if (!(d > 0.0f) || !std::isfinite(d)) throw CodecError("encode_depth: non-positive depth on a valid pixel");
        const double clamped = std::clamp(static_cast<double>(d), lo, hi);
        out.data[i] = static_cast<float>(encode_depth_value(clamped, scale, range));
    }
    return out;
}

DepthMap decode_depth(const DepthMap& state, double scale, const DepthRange& range) {
    range.validate();
    DepthMap out = state;
    for (float& v : out.data)
        if (v == v) v = static_cast<float>(decode_depth_value(v, scale, range));
    return out;
}

std::vector<double> frequency_ladder(int n, double max_freq) {
    std::vector<double> f(std::max(n, 0));
    for (int k = 0; k < n; ++k)
        f[k] = n == 1 ? 1.0 : std::pow(max_freq, static_cast<double>(k) / (n - 1));
    return f;
}

namespace {

float* fourier(const Vec3& x, const std::vector<double>& freqs, float* out) {
    for (int c = 0; c < 3; ++c) {
        for (std::size_t k = 0; k < freqs.size(); ++k) {
            const double a = freqs[k] * x[c];
            *out++ = static_cast<float>(k % 2 == 0 ? std::sin(a) : std::cos(a));
        }
    }
    return out;
}

}  // namespace

void embed_ray(const Vec3& origin, const Vec3& direction, const RayEmbeddingConfig& cfg,
               float* out) {
    const auto fo = frequency_ladder(cfg.num_origin_freqs, cfg.max_freq);
    const auto fr = frequency_ladder(cfg.num_direction_freqs, cfg.max_freq);
    for (int c = 0; c < 3; ++c) *out++ = static_cast<float>(origin[c]);
    out = fourier(origin, fo, out);
    fourier(direction, fr, out);
}

RayEmbedding encode_rays(const RayMap& rays, const RayEmbeddingConfig& cfg) {
    RayEmbedding emb;
    emb.width = rays.width;
    emb.height = rays.height;
    emb.dim = cfg.dim();
    emb.data.resize(static_cast<std::size_t>(rays.width) * rays.height * emb.dim);
    const auto fo = frequency_ladder(cfg.num_origin_freqs, cfg.max_freq);
    const auto fr = frequency_ladder(cfg.num_direction_freqs, cfg.max_freq);
    // Origin features are shared by every pixel of a pinhole raymap.
    std::vector<float> origin_part(3 + 3 * fo.size());
    for (int c = 0; c < 3; ++c) origin_part[c] = static_cast<float>(rays.origin[c]);
    fourier(rays.origin, fo, origin_part.data() + 3);
    for (std::size_t p = 0; p < rays.directions.size(); ++p) {
        float* out = emb.data.data() + p * emb.dim;
        out = std::copy(origin_part.begin(), origin_part.end(), out);
        fourier(rays.directions[p], fr, out);
    }
    return emb;
}

}  // namespace raydiff
