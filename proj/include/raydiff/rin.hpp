#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "raydiff/codec.hpp"
#include "raydiff/grid.hpp"
#include "raydiff/nn/tape.hpp"

// Recurrent-interface denoiser. A fixed set of learned latent tokens reads from the scene and
// prediction tokens, runs self-attention among themselves, and writes back into the prediction
// tokens only; per-task heads turn the written tokens into noise estimates.

namespace raydiff {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RinConfig {
    int num_blocks = 6;
    int block_depth = 4;  // self-attention + FFN pairs per block
    int num_heads = 16;
    int num_latents = 256;
    int latent_dim = 1024;
    int image_embed_dim = 256;  // D_I
    int task_embed_dim = 128;   // D_task
    int ray_embed_dim = 51;     // D_R
    int ffn_mult = 4;
    std::array<int, 3> tokenizer_channels{64, 128, 448};

    static RinConfig paper_defaults() { return {}; }
    static RinConfig toy();
    void validate() const;
    bool operator==(const RinConfig&) const = default;
};

/// Prediction-token state columns: RGB in 0..2, depth in 3.
inline constexpr int kStateColumns = 4;
inline constexpr int kDepthColumn = 3;

/// Encoded conditioning image plus the raymap of its 1/4-resolution feature grid.
struct ConditioningView {
    ImageF image;             // H x W x 3, values in [-1, 1]
    RayEmbedding rays;        // ceil(H/4) x ceil(W/4) rows of D_R
    std::vector<int> tokens;  // selected feature-grid cells (row-major indices)
};

struct SceneInput {
    std::vector<ConditioningView> views;
    std::size_t num_tokens() const;
};

struct PredictionInput {
    nn::Matrix<float> rays;   // M_p x D_R
    std::vector<TaskId> tasks;
    nn::Matrix<float> state;  // M_p x kStateColumns, unused columns zero
    std::vector<int> pixels;  // target pixel index of each token

    std::size_t size() const { return tasks.size(); }
};

struct TokenBatch {
    SceneInput scene;
    PredictionInput prediction;
    double timestep = 0;  // schedule index in [0, T]
};

/// Feature-grid cells produced by the tokenizer for an H x W image. Images whose sides are
/// not multiples of 4 are zero-padded; a cell is kept only if its center lies in the image.
struct TokenGrid {
    int width = 0;
    int height = 0;
    std::vector<int> valid_cells;
};
TokenGrid token_grid(int image_width, int image_height);

struct ParamSpec {
    std::string name;
    int rows;
    int cols;
    bool decay;
};

/// Every parameter tensor of a model with this config, in storage order.
std::vector<ParamSpec> parameter_specs(const RinConfig& cfg);
std::size_t parameter_count(const RinConfig& cfg);

namespace detail {
struct NoInit {};
}  // namespace detail

template <class T>
class RinModel {
public:
    using Tape = nn::Tape<T>;
    using Var = typename Tape::Var;
    using Matrix = nn::Matrix<T>;

    RinModel(const RinConfig& cfg, std::uint64_t seed);

    const RinConfig& config() const { return cfg_; }
    std::vector<nn::Parameter<T>>& parameters() { return params_; }
    const std::vector<nn::Parameter<T>>& parameters() const { return params_; }
    nn::Parameter<T>& param(const std::string& name);
    const nn::Parameter<T>& param(const std::string& name) const;
    std::size_t parameter_count() const;
    void zero_grad();

    /// (H/4 * W/4) x D_I features for an encoded image.
    Var tokenize_image(Tape& tape, const ImageF& image) const;
    Matrix tokenize_image(const ImageF& image) const;

    /// Scene tokens projected to the interface width, one row per selected cell.
    Var embed_scene(Tape& tape, const SceneInput& scene) const;
    Matrix embed_scene(const SceneInput& scene) const;

    /// Noise estimate, M_p x kStateColumns with columns outside each token's task zeroed.
    Var forward(Tape& tape, const TokenBatch& batch) const;
    Var forward_with_scene(Tape& tape, Var scene_tokens, const PredictionInput& pred,
                           double timestep) const;
    Matrix forward(const TokenBatch& batch, nn::OpCounter* counter = nullptr) const;
    Matrix forward_with_scene(const Matrix& scene_tokens, const PredictionInput& pred,
                              double timestep, nn::OpCounter* counter = nullptr) const;

    /// Same network with the initial latent matrix stacked twice: [Z; Z].
    RinModel duplicate_latents() const;

    template <class U>
    RinModel<U> cast() const {
        RinModel<U> out(cfg_, detail::NoInit{});
        for (std::size_t i = 0; i < params_.size(); ++i)
            out.params_[i].value = params_[i].value.template cast<U>();
        return out;
    }

private:
    template <class U>
    friend class RinModel;
    RinModel(const RinConfig& cfg, detail::NoInit);

    void allocate();
    void check_batch(const PredictionInput& pred) const;
    Var p(Tape& tape, const std::string& name) const;
    Var attention_block(Tape& tape, const std::string& prefix, Var queries, Var context,
                        bool same) const;
    Var ffn_block(Tape& tape, const std::string& prefix, Var x) const;

    RinConfig cfg_;
    std::vector<nn::Parameter<T>> params_;
    std::map<std::string, std::size_t> index_;
};

extern template class RinModel<float>;
extern template class RinModel<double>;

/// Sinusoidal embedding of a (possibly fractional) schedule index.
std::vector<double> timestep_features(double timestep, int dim);

}  // namespace raydiff
