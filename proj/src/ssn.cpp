#include "raydiff/ssn.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace raydiff {

namespace {

Camera with_scaled_translation(const Camera& cam, const Mat4& relative, double scale) {
    Mat4 T = relative;
    T.topRightCorner<3, 1>() /= scale;
    return cam.with_extrinsics(T);
}

}  // namespace

NormalizedScene normalize_scene(std::span<const Camera> conditioning, const Camera& target,
                                const DepthMap* target_depth, double d_max,
                                DegeneratePolicy policy) {
    if (conditioning.empty()) throw std::invalid_argument("normalize_scene: no conditioning cameras");
    if (!(d_max > 0.0)) throw std::invalid_argument("normalize_scene: d_max must be positive");

    std::vector<Mat4> relative;
    relative.reserve(conditioning.size());
    double scale = 0.0;
    for (const auto& cam : conditioning) {
        relative.push_back(relative_extrinsics(cam, target));
        scale = std::max(scale, relative.back().topRightCorner<3, 1>().cwiseAbs().maxCoeff());
    }
    if (scale == 0.0) {
        if (policy == DegeneratePolicy::Throw)
            throw DegenerateScale("normalize_scene: all conditioning cameras coincide with the target");
        spdlog::warn("normalize_scene: zero scene scale, clamping to {}", kMinSceneScale);
        scale = kMinSceneScale;
    }

    // Largest valid depth decides whether the scale has to grow to keep D/s <= d_max.
    std::optional<double> max_depth;
    if (target_depth) {
        for (float d : target_depth->data)
            if (valid_depth(d)) max_depth = std::max(max_depth.value_or(0.0), static_cast<double>(d));
        // s' = s * max(D/s) / d_max, so that max(D/s') = d_max.
        if (max_depth && *max_depth / scale > d_max) scale = scale * (*max_depth / scale) / d_max;
    }

    NormalizedScene out{.conditioning = {},
                        .target = target.with_extrinsics(Mat4::Identity()),
                        .scale = scale,
                        .target_depth = std::nullopt};
    out.conditioning.reserve(conditioning.size());
    for (std::size_t i = 0; i < conditioning.size(); ++i)
        out.conditioning.push_back(with_scaled_translation(conditioning[i], relative[i], scale));

    if (target_depth) {
        DepthMap normalized = *target_depth;
        const float cap = static_cast<float>(d_max);
        for (float& d : normalized.data) {
            if (!valid_depth(d)) {
                d = std::numeric_limits<float>::quiet_NaN();
                continue;
            }
            d = std::min(static_cast<float>(d / scale), cap);
        }
        out.target_depth = std::move(normalized);
    }
    return out;
}

DepthMap denormalize_depth(const DepthMap& normalized, double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("denormalize_depth: scale must be positive");
    DepthMap out = normalized;
    for (float& d : out.data) d = static_cast<float>(d * scale);
    return out;
}

}  // namespace raydiff
