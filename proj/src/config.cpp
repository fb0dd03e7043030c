#include "raydiff/config.hpp"

#include <fstream>
#include <set>

namespace raydiff {

namespace {

/// Reads known keys from one JSON object and rejects everything else.
class Strict {
public:
    Strict(const Json& j, std::string block) : j_(j), block_(std::move(block)) {
        if (!j.is_object()) throw ConfigError(block_ + ": expected a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(block_ + "." + key + ": " + e.what());
        }
    }
    const Json* child(const char* key) {
        known_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!known_.count(k)) throw ConfigError(block_ + ": unknown key '" + k + "'");
    }

private:
    const Json& j_;
    std::string block_;
    std::set<std::string> known_;
};

}  // namespace

Json to_json(const RinConfig& c) {
    return {{"num_blocks", c.num_blocks},           {"block_depth", c.block_depth},
            {"num_heads", c.num_heads},             {"num_latents", c.num_latents},
            {"latent_dim", c.latent_dim},           {"image_embed_dim", c.image_embed_dim},
            {"task_embed_dim", c.task_embed_dim},   {"ray_embed_dim", c.ray_embed_dim},
            {"ffn_mult", c.ffn_mult},               {"tokenizer_channels", c.tokenizer_channels}};
}

RinConfig read_rin_config(const Json& j, RinConfig c) {
    Strict s(j, "model");
    s.get("num_blocks", c.num_blocks);
    s.get("block_depth", c.block_depth);
    s.get("num_heads", c.num_heads);
    s.get("num_latents", c.num_latents);
    s.get("latent_dim", c.latent_dim);
    s.get("image_embed_dim", c.image_embed_dim);
    s.get("task_embed_dim", c.task_embed_dim);
    s.get("ray_embed_dim", c.ray_embed_dim);
    s.get("ffn_mult", c.ffn_mult);
    s.get("tokenizer_channels", c.tokenizer_channels);
    s.finish();
    return c;
}

Json to_json(const PipelineConfig& c) {
    return {{"num_origin_freqs", c.rays.num_origin_freqs},
            {"num_direction_freqs", c.rays.num_direction_freqs},
            {"max_freq", c.rays.max_freq},
            {"d_min", c.depth_range.d_min},
            {"d_max", c.depth_range.d_max},
            {"schedule_steps", c.schedule_steps},
            {"schedule_version", kScheduleVersion},
            {"ray_layout_version", kRayEmbeddingLayoutVersion},
            {"scene_tokens", c.scene_tokens},
            {"prediction_tokens", c.prediction_tokens}};
}

PipelineConfig read_pipeline_config(const Json& j, PipelineConfig c) {
    Strict s(j, "pipeline");
    s.get("num_origin_freqs", c.rays.num_origin_freqs);
    s.get("num_direction_freqs", c.rays.num_direction_freqs);
    s.get("max_freq", c.rays.max_freq);
    s.get("d_min", c.depth_range.d_min);
    s.get("d_max", c.depth_range.d_max);
    s.get("schedule_steps", c.schedule_steps);
    int version = kScheduleVersion;
    s.get("schedule_version", version);
    if (version != kScheduleVersion) throw ConfigError("pipeline: unsupported schedule_version");
    version = kRayEmbeddingLayoutVersion;
    s.get("ray_layout_version", version);
    if (version != kRayEmbeddingLayoutVersion) throw ConfigError("pipeline: unsupported ray_layout_version");
    s.get("scene_tokens", c.scene_tokens);
    s.get("prediction_tokens", c.prediction_tokens);
    s.finish();
    return c;
}

Json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"warmup", c.warmup},
            {"lr_floor", c.lr_floor},
            {"grad_clip", c.grad_clip},
            {"ema_decay", c.ema_decay},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"adam_eps", c.adam.eps},
            {"weight_decay", c.adam.weight_decay},
            {"seed", c.seed}};
}

TrainConfig read_train_config(const Json& j, TrainConfig c) {
    Strict s(j, "train");
    s.get("steps", c.steps);
    s.get("batch_size", c.batch_size);
    s.get("lr", c.lr);
    s.get("warmup", c.warmup);
    s.get("lr_floor", c.lr_floor);
    s.get("grad_clip", c.grad_clip);
    s.get("ema_decay", c.ema_decay);
    s.get("beta1", c.adam.beta1);
    s.get("beta2", c.adam.beta2);
    s.get("adam_eps", c.adam.eps);
    s.get("weight_decay", c.adam.weight_decay);
    s.get("seed", c.seed);
    s.finish();
    return c;
}

Json to_json(const CurationConfig& c) {
    return {{"c_min_frac", c.c_min_frac},     {"c_max_frac", c.c_max_frac},
            {"t_min", c.t_min},               {"t_max", c.t_max},
            {"alpha_min", c.alpha_min},       {"alpha_max_depth", c.alpha_max_depth},
            {"alpha_max_image", c.alpha_max_image}, {"p_min", c.p_min},
            {"min_valid", c.min_valid},       {"min_views", c.min_views},
            {"max_views", c.max_views},       {"sets_per_target", c.sets_per_target}};
}

CurationConfig read_curation_config(const Json& j, CurationConfig c) {
    Strict s(j, "curation");
    s.get("c_min_frac", c.c_min_frac);
    s.get("c_max_frac", c.c_max_frac);
    s.get("t_min", c.t_min);
    s.get("t_max", c.t_max);
    s.get("alpha_min", c.alpha_min);
    s.get("alpha_max_depth", c.alpha_max_depth);
    s.get("alpha_max_image", c.alpha_max_image);
    s.get("p_min", c.p_min);
    s.get("min_valid", c.min_valid);
    s.get("min_views", c.min_views);
    s.get("max_views", c.max_views);
    s.get("sets_per_target", c.sets_per_target);
    s.finish();
    return c;
}

Json to_json(const InferenceOptions& c) {
    return {{"eval_steps", c.eval_steps}, {"ensemble", c.ensemble}, {"clip_x0", c.clip_x0}, {"seed", c.seed}};
}

InferenceOptions read_inference_options(const Json& j, InferenceOptions c) {
    Strict s(j, "inference");
    s.get("eval_steps", c.eval_steps);
    s.get("ensemble", c.ensemble);
    s.get("clip_x0", c.clip_x0);
    s.get("seed", c.seed);
    s.finish();
    return c;
}

Json to_json(const DataConfig& c) {
    return {{"num_scenes", c.num_scenes}, {"num_frames", c.num_frames}, {"width", c.width},
            {"height", c.height},         {"layout", layout_name(c.layout)}, {"fov_degrees", c.fov_degrees}};
}

DataConfig read_data_config(const Json& j, DataConfig c) {
    Strict s(j, "data");
    s.get("num_scenes", c.num_scenes);
    s.get("num_frames", c.num_frames);
    s.get("width", c.width);
    s.get("height", c.height);
    std::string layout = layout_name(c.layout);
    s.get("layout", layout);
    try {
        c.layout = parse_layout(layout);
    } catch (const DataError& e) {
        throw ConfigError(std::string("data.layout: ") + e.what());
    }
    s.get("fov_degrees", c.fov_degrees);
    s.finish();
    return c;
}

RunConfig RunConfig::preset(const std::string& profile) {
    RunConfig c;
    c.profile = profile;
    if (profile == "toy") {
        c.model = RinConfig::toy();
        c.pipeline.scene_tokens = 128;
        c.pipeline.prediction_tokens = 512;
        c.train.steps = 20000;
        c.train.batch_size = 8;
        c.train.lr = 1e-3;
        c.train.warmup = 250;
    } else if (profile == "paper-defaults") {
        c.model = RinConfig::paper_defaults();
        c.data.width = 256;
        c.data.height = 256;
        c.train.steps = 1000000;
        c.train.batch_size = 8;
        c.train.lr = 1e-4;
        c.train.warmup = 10000;
    } else {
        throw ConfigError("unknown profile '" + profile + "' (expected toy or paper-defaults)");
    }
    return c;
}

void RunConfig::validate() const {
    model.validate();
    pipeline.validate();
    train.validate();
    curation.validate();
    if (model.ray_embed_dim != pipeline.rays.dim())
        throw ConfigError("model.ray_embed_dim must equal 3 (num_origin_freqs + num_direction_freqs + 1)");
    if (inference.eval_steps < 1 || inference.eval_steps > pipeline.schedule_steps)
        throw ConfigError("inference.eval_steps must lie in [1, schedule_steps]");
    if (inference.ensemble < 1) throw ConfigError("inference.ensemble must be at least 1");
    if (data.num_scenes < 0 || data.num_frames < 0) throw ConfigError("data: counts must be non-negative");
    if (data.width <= 0 || data.height <= 0 || data.width % 4 || data.height % 4)
        throw ConfigError("data: resolution must be positive and divisible by 4");
}

Json to_json(const RunConfig& c) {
    return {{"profile", c.profile},           {"seed", c.seed},
            {"data", to_json(c.data)},        {"curation", to_json(c.curation)},
            {"model", to_json(c.model)},      {"pipeline", to_json(c.pipeline)},
            {"train", to_json(c.train)},      {"inference", to_json(c.inference)}};
}

RunConfig read_run_config(const Json& j) {
    Strict s(j, "config");
    std::string profile = "toy";
    s.get("profile", profile);
    RunConfig c = RunConfig::preset(profile);
    s.get("seed", c.seed);
    if (const Json* d = s.child("data")) c.data = read_data_config(*d, c.data);
    if (const Json* d = s.child("curation")) c.curation = read_curation_config(*d, c.curation);
    if (const Json* d = s.child("model")) c.model = read_rin_config(*d, c.model);
    if (const Json* d = s.child("pipeline")) c.pipeline = read_pipeline_config(*d, c.pipeline);
    if (const Json* d = s.child("train")) c.train = read_train_config(*d, c.train);
    if (const Json* d = s.child("inference")) c.inference = read_inference_options(*d, c.inference);
    s.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    Json j;
    try {
        j = Json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return read_run_config(j);
}

void save_run_config(const std::string& path, const RunConfig& c) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write " + path);
    os << to_json(c).dump(2) << '\n';
}

}  // namespace raydiff
