#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "raydiff/geometry.hpp"

namespace raydiff {

class DegenerateScale : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// How normalize_scene treats a zero scene scale (every conditioning camera at the target).
enum class DegeneratePolicy {
    Throw,  // curation / training: such samples are rejected
    Clamp,  // inference: clamp s to kMinSceneScale and log a warning
};

inline constexpr double kMinSceneScale = 1e-6;

/// Conditioning cameras expressed relative to the target, with translations divided by the
/// scene scale. The target sits at the origin with identity rotation.
struct NormalizedScene {
    std::vector<Camera> conditioning;
    Camera target;
    double scale = 1.0;
    std::optional<DepthMap> target_depth;  // D / scale, invalid pixels kept as NaN
};

NormalizedScene normalize_scene(std::span<const Camera> conditioning, const Camera& target,
                                const DepthMap* target_depth, double d_max,
                                DegeneratePolicy policy = DegeneratePolicy::Throw);

/// Re-injects the scene scale into a normalized depth prediction.
DepthMap denormalize_depth(const DepthMap& normalized, double scale);

}  // namespace raydiff
