#include "raydiff/tokens.hpp"

#include <algorithm>

namespace raydiff {

Camera feature_grid_camera(const Camera& camera) {
    const TokenGrid grid = token_grid(camera.width(), camera.height());
    Mat3 K = camera.K();
    K.row(0) *= 0.25;
    K.row(1) *= 0.25;
    return Camera(K, camera.T(), grid.width, grid.height);
}

RayEmbedding feature_grid_rays(const Camera& camera, const RayEmbeddingConfig& cfg) {
    return encode_rays(compute_raymap(feature_grid_camera(camera)), cfg);
}

std::vector<int> sample_without_replacement(const std::vector<int>& pool, std::size_t count, std::mt19937_64& rng) {
    std::vector<int> out = pool;
    if (count < out.size()) {
        // Partial Fisher-Yates.
        for (std::size_t i = 0; i < count; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, out.size() - 1);
            std::swap(out[i], out[pick(rng)]);
        }
        out.resize(count);
    }
    std::sort(out.begin(), out.end());
    return out;
}

ConditioningView make_conditioning_view(const ImageF& encoded_image, const Camera& camera,
                                        const RayEmbeddingConfig& rays, std::size_t max_tokens,
                                        std::mt19937_64& rng) {
    if (encoded_image.width != camera.width() || encoded_image.height != camera.height())
        throw ConfigError("conditioning image does not match its camera");
    ConditioningView view;
    view.image = encoded_image;
    view.rays = feature_grid_rays(camera, rays);
    view.tokens = sample_without_replacement(token_grid(camera.width(), camera.height()).valid_cells, max_tokens, rng);
    return view;
}

PredictionInput make_prediction_input(const RayEmbedding& target_rays, std::vector<int> pixels,
                                      std::vector<TaskId> tasks, nn::Matrix<float> state) {
    if (pixels.size() != tasks.size() || state.rows() != static_cast<Eigen::Index>(pixels.size()))
        throw ConfigError("prediction input: pixel, task and state counts differ");
    PredictionInput p;
    p.rays.resize(static_cast<Eigen::Index>(pixels.size()), target_rays.dim);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        if (pixels[i] < 0 || static_cast<std::size_t>(pixels[i]) >= static_cast<std::size_t>(target_rays.width) * target_rays.height)
            throw ConfigError("prediction input: pixel index out of range");
        std::copy_n(target_rays.row(pixels[i]), target_rays.dim, p.rays.row(static_cast<Eigen::Index>(i)).data());
    }
    p.pixels = std::move(pixels);
    p.tasks = std::move(tasks);
    p.state = std::move(state);
    return p;
}

}  // namespace raydiff
