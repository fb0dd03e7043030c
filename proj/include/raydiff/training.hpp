#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "raydiff/codec.hpp"
#include "raydiff/datapipe.hpp"
#include "raydiff/diffusion.hpp"
#include "raydiff/optim.hpp"
#include "raydiff/rin.hpp"

// Training objective, the optimisation loop and checkpoints.

namespace raydiff {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Settings shared by training and inference; a checkpoint carries them so sampling uses the
/// same token layout and codecs the model was trained with.
struct PipelineConfig {
    RayEmbeddingConfig rays;
    DepthRange depth_range;  // d_max doubles as the scene-normalization depth cap
    int schedule_steps = 1000;
    int scene_tokens = 1024;       // M_s, per conditioning view
    int prediction_tokens = 4096;  // M_p

    void validate() const;
    bool operator==(const PipelineConfig& o) const;
};

struct TrainConfig {
    std::int64_t steps = 5000;
    int batch_size = 8;  // samples per optimizer step (gradient accumulation)
    double lr = 1e-4;
    std::int64_t warmup = 1000;
    double lr_floor = 0.0;
    double grad_clip = 1.0;
    double ema_decay = 0.999;
    AdamWConfig adam;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class TaskMode { Rgb, Depth, Split };

struct TrainingExample {
    TokenBatch batch;            // x_t in batch.prediction.state
    nn::Matrix<float> noise;     // eps, zero outside each token's task columns
    std::size_t rgb_tokens = 0;
    std::size_t depth_tokens = 0;
    TaskMode mode = TaskMode::Rgb;
    double scale = 1.0;
};

/// Builds one noised example. Depth tokens come only from valid ground-truth pixels and only
/// when the sample was curated for the depth task. `mode` overrides the random task split.
TrainingExample make_training_example(const SceneRecord& scene, const CuratedSample& sample,
                                      const PipelineConfig& cfg, const NoiseSchedule& schedule,
                                      std::mt19937_64& rng, std::optional<TaskMode> mode = std::nullopt);

struct LossParts {
    double rgb = 0;    // mean squared error over RGB token entries
    double depth = 0;  // mean absolute error over depth tokens
    double total = 0;
    std::size_t rgb_tokens = 0;
    std::size_t depth_tokens = 0;
};

/// Loss of one example. With `grad_weight` > 0 the gradient of grad_weight * total is added
/// to the model's parameter gradients.
LossParts example_loss(RinModel<float>& model, const TrainingExample& example, float grad_weight = 0.0f);

/// Scenes plus curated samples; scenes are looked up by id.
class TrainingData {
public:
    TrainingData(std::vector<SceneRecord> scenes, std::vector<CuratedSample> samples);

    const std::vector<SceneRecord>& scenes() const { return scenes_; }
    const std::vector<CuratedSample>& samples() const { return samples_; }
    const SceneRecord& scene(const std::string& id) const;

private:
    std::vector<SceneRecord> scenes_;
    std::vector<CuratedSample> samples_;
    std::map<std::string, std::size_t> index_;
};

struct StepStats {
    std::int64_t step = 0;  // index of the step just taken
    LossParts loss;         // batch means
    double lr = 0;
    double grad_norm = 0;   // before clipping
    double seconds = 0;
};

/// AdamW + warmup/cosine + clipping + EMA. Randomness for step k, sample j comes from
/// mix_seed(mix_seed(seed, k), j), so a run resumed from a checkpoint repeats an uninterrupted
/// run exactly.
class Trainer {
public:
    Trainer(RinModel<float> model, PipelineConfig pipeline, TrainConfig train);

    StepStats step(const TrainingData& data);
    /// Steps until `steps_done() == until`, calling `on_step` after each.
    void run(const TrainingData& data, std::int64_t until,
             const std::function<void(const StepStats&)>& on_step = {});

    RinModel<float>& model() { return model_; }
    const RinModel<float>& model() const { return model_; }
    const PipelineConfig& pipeline() const { return pipeline_; }
    const TrainConfig& train_config() const { return train_; }
    /// Total-step horizon of the learning-rate schedule; defaults to train_config().steps.
    void set_schedule_horizon(std::int64_t total) { horizon_ = total; }
    std::int64_t schedule_horizon() const { return horizon_; }
    Ema<float>& ema() { return ema_; }
    const Ema<float>& ema() const { return ema_; }
    AdamW& optimizer() { return opt_; }
    const AdamW& optimizer() const { return opt_; }
    std::int64_t steps_done() const { return step_; }
    void set_steps_done(std::int64_t s) { step_ = s; }
    double learning_rate(std::int64_t step) const;

    /// Copy of the model with EMA weights.
    RinModel<float> ema_model() const;

    /// Same training state with the latent matrix duplicated to 2L rows in the weights, the
    /// EMA shadow and both Adam moments. Step counter and settings are kept. With `jitter` > 0
    /// the second copy (weights and EMA alike) gets N(0, jitter^2) noise so the copies can
    /// separate under training.
    Trainer expanded(double jitter = 0.0, std::uint64_t seed = 0) const;

    void save(const std::filesystem::path& path) const;
    static Trainer load(const std::filesystem::path& path);

private:
    RinModel<float> model_;
    PipelineConfig pipeline_;
    TrainConfig train_;
    NoiseSchedule schedule_;
    AdamW opt_;
    Ema<float> ema_;
    std::int64_t step_ = 0;
    std::int64_t horizon_;
};

/// Largest absolute difference between the two models' noise estimates on a fixed batch built
/// from a small synthetic scene (two conditioning views, mixed RGB and depth tokens).
double probe_output_difference(const RinModel<float>& a, const RinModel<float>& b, const PipelineConfig& pipeline,
                               std::uint64_t seed = 0);

/// JSON-lines training log record.
std::string log_line(const StepStats& s, double ema_decay, double wall_seconds);

// ---------------------------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

/// Model, EMA weights and the settings needed to sample from it.
struct LoadedModel {
    RinModel<float> model;      // EMA weights when the checkpoint has them
    RinModel<float> raw;        // optimiser weights
    PipelineConfig pipeline;
    std::int64_t step = 0;
};

LoadedModel load_model(const std::filesystem::path& path);

}  // namespace raydiff
