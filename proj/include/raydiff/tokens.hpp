#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "raydiff/codec.hpp"
#include "raydiff/geometry.hpp"
#include "raydiff/rin.hpp"

// Builders that turn normalized cameras and images into RIN token inputs.

namespace raydiff {

/// Camera of the 1/4-resolution feature grid: cell (x, y) is centred on full-resolution
/// continuous coordinate (4x + 2, 4y + 2).
Camera feature_grid_camera(const Camera& camera);

/// Ray embedding of every cell of the feature grid.
RayEmbedding feature_grid_rays(const Camera& camera, const RayEmbeddingConfig& cfg);

/// `count` distinct elements of `pool` drawn without replacement (all of them if the pool is
/// smaller), returned sorted.
std::vector<int> sample_without_replacement(const std::vector<int>& pool, std::size_t count, std::mt19937_64& rng);

/// Conditioning view with up to `max_tokens` randomly selected feature-grid cells.
/// `encoded_image` is in state space [-1, 1].
ConditioningView make_conditioning_view(const ImageF& encoded_image, const Camera& camera,
                                        const RayEmbeddingConfig& rays, std::size_t max_tokens,
                                        std::mt19937_64& rng);

/// Prediction tokens for the given target pixels. `state` rows follow `pixels`.
PredictionInput make_prediction_input(const RayEmbedding& target_rays, std::vector<int> pixels,
                                      std::vector<TaskId> tasks, nn::Matrix<float> state);

}  // namespace raydiff
