#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "raydiff/geometry.hpp"
#include "raydiff/grid.hpp"

// Maps between physical quantities and diffusion state in [-1, 1].

namespace raydiff {

class CodecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class TaskId { Rgb = 0, Depth = 1 };

inline const char* task_name(TaskId t) { return t == TaskId::Rgb ? "rgb" : "depth"; }
TaskId parse_task(const std::string& name);
inline int state_dim(TaskId t) { return t == TaskId::Rgb ? 3 : 1; }

/// What to do with inputs outside the representable range.
enum class RangePolicy {
    Reject,  // training data validation
    Clamp,   // inference, logs a warning once per call
};

struct DepthRange {
    double d_min = 0.1;
    double d_max = 200.0;

    void validate() const {
        if (!(d_min > 0.0 && d_min < d_max)) throw CodecError("DepthRange: need 0 < d_min < d_max");
    }
    double log_span() const { return std::log(d_max / d_min); }
};

// RGB: P = 2 I - 1, I = (P + 1) / 2.
ImageF encode_rgb(const ImageF& image, RangePolicy policy = RangePolicy::Reject);
ImageF decode_rgb(const ImageF& state);
inline double encode_rgb_value(double i) { return 2.0 * i - 1.0; }
inline double decode_rgb_value(double p) { return 0.5 * (p + 1.0); }

// Depth in log space: P = 2 log(D / (s d_min)) / log(d_max / d_min) - 1 and its exact inverse.
double encode_depth_value(double depth, double scale, const DepthRange& range);
double decode_depth_value(double state, double scale, const DepthRange& range);

/// Encodes every valid pixel (NaN/<=0 stay NaN). Valid depths outside [s d_min, s d_max] are
/// clamped; a non-positive depth on a pixel flagged valid by `mask` is an error.
DepthMap encode_depth(const DepthMap& depth, double scale, const DepthRange& range,
                      const Mask* mask = nullptr);
DepthMap decode_depth(const DepthMap& state, double scale, const DepthRange& range);

struct RayEmbeddingConfig {
    int num_origin_freqs = 8;     // N_o
    int num_direction_freqs = 8;  // N_r
    double max_freq = 100.0;

    int dim() const { return 3 * (num_origin_freqs + num_direction_freqs + 1); }
};

/// Frequency ladder f_k = max_freq^(k/(n-1)), geometric from 1 to max_freq.
std::vector<double> frequency_ladder(int n, double max_freq);

/// Per-ray embedding, layout version 1:
///   [ o_x, o_y, o_z,
///     for c in (x,y,z): for k < N_o: (k even ? sin : cos)(f_k * o_c),
///     for c in (x,y,z): for k < N_r: (k even ? sin : cos)(f_k * r_c) ]
/// giving 3 + 3 N_o + 3 N_r = 3 (N_o + N_r + 1) values.
inline constexpr int kRayEmbeddingLayoutVersion = 1;
void embed_ray(const Vec3& origin, const Vec3& direction, const RayEmbeddingConfig& cfg,
               float* out);

/// H*W x D_R matrix stored row-major, one row per pixel.
struct RayEmbedding {
    int width = 0;
    int height = 0;
    int dim = 0;
    std::vector<float> data;

    const float* row(std::size_t pixel) const { return data.data() + pixel * dim; }
};

RayEmbedding encode_rays(const RayMap& rays, const RayEmbeddingConfig& cfg);

}  // namespace raydiff
