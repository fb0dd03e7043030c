#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raydiff/codec.hpp"
#include "raydiff/diffusion.hpp"
#include "raydiff/geometry.hpp"
#include "raydiff/rin.hpp"

// Novel view and depth synthesis from posed images, incremental conditioning and metrics.

namespace raydiff {

struct PipelineConfig;

class InferenceError : public std::runtime_error {
public:
    InferenceError(std::size_t target, const std::string& what)
        : std::runtime_error("target " + std::to_string(target) + ": " + what), target(target) {}
    std::size_t target;
};

struct InferenceOptions {
    int eval_steps = 10;  // T_eval
    int ensemble = 5;     // E
    bool clip_x0 = true;
    std::uint64_t seed = 0;
};

struct PosedImage {
    ImageF image;  // RGB in [0, 1]
    Camera camera;
};

struct GenerationRequest {
    std::vector<PosedImage> conditioning;
    std::vector<Camera> targets;
    bool rgb = true;
    bool depth = true;
    bool incremental = false;
    InferenceOptions options;

    void validate() const;
};

struct TargetResult {
    std::optional<ImageF> image;    // [0, 1]
    std::optional<DepthMap> depth;  // z-depth in world units
    PointCloud cloud;               // world frame
    double scale = 1.0;             // scene scale used for this target
    std::size_t conditioning_views = 0;
    std::size_t scene_tokens = 0;   // tokens in the read context besides prediction tokens
    std::size_t rgb_evaluations = 0;    // network evaluations spent on each task
    std::size_t depth_evaluations = 0;
};

/// Generates every target independently from the request's conditioning views.
std::vector<TargetResult> synthesize(const RinModel<float>& model, const PipelineConfig& pipeline,
                                     const GenerationRequest& request);

/// Visits targets by increasing camera-centre distance to the initial conditioning set and
/// appends each generated image to the conditioning pool. Results are in request order.
std::vector<TargetResult> synthesize_incremental(const RinModel<float>& model, const PipelineConfig& pipeline,
                                                 const GenerationRequest& request);

/// Dispatches on request.incremental.
std::vector<TargetResult> generate(const RinModel<float>& model, const PipelineConfig& pipeline,
                                   const GenerationRequest& request);

/// Order in which synthesize_incremental visits the targets.
std::vector<std::size_t> incremental_order(const std::vector<PosedImage>& conditioning,
                                           const std::vector<Camera>& targets);

/// One target, one conditioning set. `target_index` keys the target's random streams, so a
/// target gets the same noise whether generated alone, in a batch or incrementally.
TargetResult synthesize_target(const RinModel<float>& model, const PipelineConfig& pipeline,
                               const std::vector<PosedImage>& conditioning, const Camera& target, bool rgb,
                               bool depth, const InferenceOptions& options, std::size_t target_index);

// ---------------------------------------------------------------------------------------------
// Metrics

struct ImageMetrics {
    double mse = 0;
    std::optional<double> psnr;  // empty when the prediction is exact (infinite PSNR)
};

struct DepthMetrics {
    double abs_rel = 0;
    double sq_rel = 0;
    double rmse = 0;
    double delta_125 = 0;  // fraction with max(p/g, g/p) < 1.25
    std::size_t valid = 0;
};

/// PSNR over [0, 1] images, 10 log10(1 / MSE).
ImageMetrics image_metrics(const ImageF& pred, const ImageF& gt);
/// Depth metrics over pixels valid in `gt` (and `mask` when given). Empty when no pixel is
/// valid. No scale alignment is applied.
std::optional<DepthMetrics> depth_metrics(const DepthMap& pred, const DepthMap& gt, const Mask* mask = nullptr);

struct FrameMetrics {
    std::string name;
    std::optional<ImageMetrics> image;
    std::optional<DepthMetrics> depth;
};

/// Per-frame metrics plus aggregates. Frames with infinite PSNR are excluded from the PSNR
/// mean and counted separately.
nlohmann::json metrics_report(const std::vector<FrameMetrics>& frames);

// ---------------------------------------------------------------------------------------------
// Outputs

/// Writes <stem>.png, <stem>_depth.raw, <stem>_depth.png (16-bit preview) and <stem>.ply for
/// whatever the result holds.
void write_target_outputs(const std::filesystem::path& dir, const std::string& stem, const TargetResult& result);

}  // namespace raydiff
