#include "raydiff/training.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "raydiff/ssn.hpp"
#include "raydiff/tokens.hpp"

namespace raydiff {

void PipelineConfig::validate() const {
    depth_range.validate();
    if (rays.num_origin_freqs < 0 || rays.num_direction_freqs < 0 || !(rays.max_freq > 0.0))
        throw ConfigError("pipeline: invalid ray embedding settings");
    if (schedule_steps < 1) throw ConfigError("pipeline: schedule_steps must be positive");
    if (scene_tokens < 1 || prediction_tokens < 1) throw ConfigError("pipeline: token counts must be positive");
}

bool PipelineConfig::operator==(const PipelineConfig& o) const {
    return rays.num_origin_freqs == o.rays.num_origin_freqs && rays.num_direction_freqs == o.rays.num_direction_freqs &&
           rays.max_freq == o.rays.max_freq && depth_range.d_min == o.depth_range.d_min &&
           depth_range.d_max == o.depth_range.d_max && schedule_steps == o.schedule_steps &&
           scene_tokens == o.scene_tokens && prediction_tokens == o.prediction_tokens;
}

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("train: steps must be non-negative");
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (!(lr > 0.0) || lr_floor < 0.0 || lr_floor > lr) throw ConfigError("train: need 0 <= lr_floor <= lr, lr > 0");
    if (warmup < 0) throw ConfigError("train: warmup must be non-negative");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0, 1)");
}

namespace {

bool has_valid_depth(const Frame& f) {
    if (!f.depth) return false;
    for (float d : f.depth->data)
        if (valid_depth(d)) return true;
    return false;
}

}  // namespace

TrainingExample make_training_example(const SceneRecord& scene, const CuratedSample& sample,
                                      const PipelineConfig& cfg, const NoiseSchedule& schedule,
                                      std::mt19937_64& rng, std::optional<TaskMode> mode) {
    if (sample.conditioning.empty()) throw TrainingError("sample has no conditioning views");
    const Frame& target = scene.frames.at(sample.target);
    const bool has_image = target.image.pixels() > 0;
    const bool depth_ok = sample.task == TaskId::Depth && has_valid_depth(target);
    if (!has_image && !depth_ok)
        throw TrainingError("nothing to supervise: target " + std::to_string(sample.target) + " of scene " + scene.id +
                            " has neither an image nor usable depth");

    if (!mode) {
        if (!depth_ok) {
            mode = TaskMode::Rgb;
        } else if (!has_image) {
            mode = TaskMode::Depth;
        } else {
            std::uniform_int_distribution<int> pick(0, 2);
            mode = static_cast<TaskMode>(pick(rng));
        }
    }
    if ((*mode != TaskMode::Rgb && !depth_ok) || (*mode != TaskMode::Depth && !has_image))
        throw TrainingError("requested task mode has no supervision for this sample");

    std::vector<Camera> cams;
    for (int c : sample.conditioning) cams.push_back(scene.frames.at(c).camera);
    const NormalizedScene ns = normalize_scene(cams, target.camera, depth_ok ? &*target.depth : nullptr,
                                               cfg.depth_range.d_max, DegeneratePolicy::Throw);

    TrainingExample ex;
    ex.mode = *mode;
    ex.scale = ns.scale;
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const Frame& f = scene.frames.at(sample.conditioning[i]);
        ex.batch.scene.views.push_back(make_conditioning_view(encode_rgb(to_float(f.image)), ns.conditioning[i],
                                                              cfg.rays, cfg.scene_tokens, rng));
    }

    const int W = target.camera.width(), H = target.camera.height();
    const std::size_t M = static_cast<std::size_t>(cfg.prediction_tokens);
    std::vector<int> all(static_cast<std::size_t>(W) * H);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    std::vector<int> valid;
    if (depth_ok)
        for (int i : all)
            if (valid_depth(ns.target_depth->data[i])) valid.push_back(i);

    std::size_t n_rgb = 0, n_depth = 0;
    switch (*mode) {
        case TaskMode::Rgb: n_rgb = M; break;
        case TaskMode::Depth: n_depth = M; break;
        case TaskMode::Split: n_depth = M / 2, n_rgb = M - M / 2; break;
    }
    const std::vector<int> rgb_px = n_rgb ? sample_without_replacement(all, n_rgb, rng) : std::vector<int>{};
    const std::vector<int> depth_px = n_depth ? sample_without_replacement(valid, n_depth, rng) : std::vector<int>{};
    ex.rgb_tokens = rgb_px.size();
    ex.depth_tokens = depth_px.size();

    const std::size_t n = rgb_px.size() + depth_px.size();
    std::vector<int> pixels;
    std::vector<TaskId> tasks;
    StateMatrix x0 = StateMatrix::Zero(static_cast<Eigen::Index>(n), kStateColumns);
    StateMatrix mask = StateMatrix::Zero(static_cast<Eigen::Index>(n), kStateColumns);
    for (int px : rgb_px) {
        const auto r = static_cast<Eigen::Index>(pixels.size());
        for (int c = 0; c < 3; ++c) {
            x0(r, c) = encode_rgb_value(target.image.data[static_cast<std::size_t>(px) * 3 + c] / 255.0);
            mask(r, c) = 1.0;
        }
        pixels.push_back(px);
        tasks.push_back(TaskId::Rgb);
    }
    for (int px : depth_px) {
        const auto r = static_cast<Eigen::Index>(pixels.size());
        const double d = std::clamp(static_cast<double>(ns.target_depth->data[px]), cfg.depth_range.d_min,
                                    cfg.depth_range.d_max);
        x0(r, kDepthColumn) = encode_depth_value(d, 1.0, cfg.depth_range);
        mask(r, kDepthColumn) = 1.0;
        pixels.push_back(px);
        tasks.push_back(TaskId::Depth);
    }

    std::uniform_int_distribution<int> pick_t(1, schedule.steps());
    const int t = pick_t(rng);
    const StateMatrix eps = (gaussian(x0.rows(), x0.cols(), rng).array() * mask.array()).matrix();
    const StateMatrix xt = (q_sample(schedule, x0, t, eps).array() * mask.array()).matrix();

    ex.noise = eps.cast<float>();
    ex.batch.timestep = t;
    ex.batch.prediction = make_prediction_input(encode_rays(compute_raymap(ns.target), cfg.rays), std::move(pixels),
                                                std::move(tasks), xt.cast<float>());
    return ex;
}

LossParts example_loss(RinModel<float>& model, const TrainingExample& ex, float grad_weight) {
    const bool grad = grad_weight > 0.0f;
    nn::Tape<float> tape(grad);
    const auto out = model.forward(tape, ex.batch);
    const nn::Matrix<float>& eps_hat = tape.value(out);
    const nn::Matrix<float> diff = eps_hat - ex.noise;

    LossParts loss;
    nn::Matrix<float> seed = nn::Matrix<float>::Zero(diff.rows(), diff.cols());
    const auto& tasks = ex.batch.prediction.tasks;
    for (TaskId t : tasks) (t == TaskId::Rgb ? loss.rgb_tokens : loss.depth_tokens)++;
    const double rgb_norm = loss.rgb_tokens ? 1.0 / (3.0 * loss.rgb_tokens) : 0.0;
    const double depth_norm = loss.depth_tokens ? 1.0 / loss.depth_tokens : 0.0;
    for (Eigen::Index i = 0; i < diff.rows(); ++i) {
        if (tasks[i] == TaskId::Rgb) {
            for (int c = 0; c < 3; ++c) {
                loss.rgb += static_cast<double>(diff(i, c)) * diff(i, c) * rgb_norm;
                seed(i, c) = static_cast<float>(grad_weight * 2.0 * diff(i, c) * rgb_norm);
            }
        } else {
            const float d = diff(i, kDepthColumn);
            loss.depth += std::abs(static_cast<double>(d)) * depth_norm;
            seed(i, kDepthColumn) = static_cast<float>(grad_weight * (d > 0.0f ? 1.0 : d < 0.0f ? -1.0 : 0.0) * depth_norm);
        }
    }
    loss.total = loss.rgb + loss.depth;
    if (grad) tape.backward(out, seed);
    return loss;
}

TrainingData::TrainingData(std::vector<SceneRecord> scenes, std::vector<CuratedSample> samples)
    : scenes_(std::move(scenes)), samples_(std::move(samples)) {
    for (std::size_t i = 0; i < scenes_.size(); ++i)
        if (!index_.emplace(scenes_[i].id, i).second) throw TrainingError("duplicate scene id " + scenes_[i].id);
    for (const auto& s : samples_) {
        const SceneRecord& sc = scene(s.scene);
        const int n = static_cast<int>(sc.frames.size());
        if (s.target < 0 || s.target >= n) throw TrainingError("sample target out of range in scene " + s.scene);
        for (int c : s.conditioning)
            if (c < 0 || c >= n) throw TrainingError("sample conditioning index out of range in scene " + s.scene);
    }
}

const SceneRecord& TrainingData::scene(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw TrainingError("unknown scene id " + id);
    return scenes_[it->second];
}

Trainer::Trainer(RinModel<float> model, PipelineConfig pipeline, TrainConfig train)
    : model_(std::move(model)),
      pipeline_(pipeline),
      train_(train),
      schedule_(pipeline.schedule_steps),
      opt_(train.adam),
      ema_(train.ema_decay),
      horizon_(train.steps) {
    pipeline_.validate();
    train_.validate();
    model_.config().validate();
    if (model_.config().ray_embed_dim != pipeline_.rays.dim())
        throw ConfigError("model ray_embed_dim does not match the ray embedding settings");
    ema_.reset(model_.parameters());
}

double Trainer::learning_rate(std::int64_t step) const {
    return LrSchedule{train_.lr, train_.warmup, std::max<std::int64_t>(horizon_, 1), train_.lr_floor}.at(step);
}

StepStats Trainer::step(const TrainingData& data) {
    if (data.samples().empty()) throw TrainingError("no training samples");
    const auto start = std::chrono::steady_clock::now();
    StepStats stats;
    stats.step = step_;
    model_.zero_grad();
    const std::uint64_t step_seed = mix_seed(train_.seed, static_cast<std::uint64_t>(step_));
    const float weight = 1.0f / static_cast<float>(train_.batch_size);
    for (int j = 0; j < train_.batch_size; ++j) {
        std::mt19937_64 rng(mix_seed(step_seed, static_cast<std::uint64_t>(j)));
        std::uniform_int_distribution<std::size_t> pick(0, data.samples().size() - 1);
        const CuratedSample& sample = data.samples()[pick(rng)];
        const TrainingExample ex = make_training_example(data.scene(sample.scene), sample, pipeline_, schedule_, rng);
        const LossParts l = example_loss(model_, ex, weight);
        stats.loss.rgb += l.rgb * weight;
        stats.loss.depth += l.depth * weight;
        stats.loss.total += l.total * weight;
        stats.loss.rgb_tokens += l.rgb_tokens;
        stats.loss.depth_tokens += l.depth_tokens;
    }
    stats.grad_norm = clip_grad_norm(model_.parameters(), train_.grad_clip);
    stats.lr = learning_rate(step_);
    opt_.step(model_.parameters(), stats.lr);
    ema_.update(model_.parameters());
    ++step_;
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return stats;
}

void Trainer::run(const TrainingData& data, std::int64_t until, const std::function<void(const StepStats&)>& on_step) {
    while (step_ < until) {
        const StepStats s = step(data);
        if (on_step) on_step(s);
    }
}

RinModel<float> Trainer::ema_model() const {
    RinModel<float> m = model_;
    ema_.copy_to(m.parameters());
    return m;
}

Trainer Trainer::expanded(double jitter, std::uint64_t seed) const {
    Trainer out(model_.duplicate_latents(), pipeline_, train_);
    auto stack = [](const nn::Matrix<float>& z) {
        nn::Matrix<float> s(2 * z.rows(), z.cols());
        s << z, z;
        return s;
    };
    const auto& params = model_.parameters();
    out.ema_.shadow() = ema_.shadow();
    if (!opt_.first_moment().empty()) {
        out.opt_.first_moment() = opt_.first_moment();
        out.opt_.second_moment() = opt_.second_moment();
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != "latents") continue;
        out.ema_.shadow()[i] = stack(ema_.shadow()[i]);
        if (!opt_.first_moment().empty()) {
            out.opt_.first_moment()[i] = stack(opt_.first_moment()[i]);
            out.opt_.second_moment()[i] = stack(opt_.second_moment()[i]);
        }
    }
    if (jitter > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<float> n(0.0f, static_cast<float>(jitter));
        auto& params = out.model_.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].name != "latents") continue;
            const Eigen::Index L = params[i].value.rows() / 2;
            for (Eigen::Index r = L; r < 2 * L; ++r)
                for (Eigen::Index c = 0; c < params[i].value.cols(); ++c) {
                    const float e = n(rng);
                    params[i].value(r, c) += e;
                    out.ema_.shadow()[i](r, c) += e;
                }
        }
    }
    out.opt_.set_steps(opt_.steps());
    out.step_ = step_;
    out.horizon_ = horizon_;
    return out;
}

double probe_output_difference(const RinModel<float>& a, const RinModel<float>& b, const PipelineConfig& pipeline,
                               std::uint64_t seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.num_frames = 3;
    const SceneRecord scene = generate_synthetic_scene(spec);
    const CuratedSample sample{scene.id, 2, {0, 1}, TaskId::Depth};
    const NoiseSchedule schedule(pipeline.schedule_steps);
    std::mt19937_64 rng(mix_seed(seed, 1));
    const TrainingExample ex = make_training_example(scene, sample, pipeline, schedule, rng, TaskMode::Split);
    return (a.forward(ex.batch) - b.forward(ex.batch)).cwiseAbs().maxCoeff();
}

std::string log_line(const StepStats& s, double ema_decay, double wall_seconds) {
    std::ostringstream os;
    os.precision(9);
    os << "{\"step\":" << s.step << ",\"loss\":" << s.loss.total << ",\"loss_rgb\":" << s.loss.rgb
       << ",\"loss_depth\":" << s.loss.depth << ",\"rgb_tokens\":" << s.loss.rgb_tokens
       << ",\"depth_tokens\":" << s.loss.depth_tokens << ",\"lr\":" << s.lr << ",\"grad_norm\":" << s.grad_norm
       << ",\"ema_decay\":" << ema_decay << ",\"step_seconds\":" << s.seconds << ",\"wall_time\":" << wall_seconds
       << "}";
    return os.str();
}

}  // namespace raydiff
