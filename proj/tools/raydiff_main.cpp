// raydiff command-line front end: gen, curate, train, expand, sample, eval.
//
// Exit codes: 0 success, 2 invalid arguments or configuration, 3 corrupt checkpoint, shard or
// saved output, 1 anything else. Logs go to stderr; artifacts go to --out.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "raydiff/config.hpp"
#include "raydiff/image_io.hpp"
#include "raydiff/inference.hpp"
#include "raydiff/training.hpp"

namespace fs = std::filesystem;
using namespace raydiff;

namespace {

constexpr const char* kCheckpointName = "checkpoint.ckpt";

/// Input files that exist but cannot be decoded.
class CorruptInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::string profile = "toy";
    std::string out;
    int threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
    cmd->add_option("--config", c.config, "run config JSON (overrides --profile)")->check(CLI::ExistingFile);
    cmd->add_option("--profile", c.profile, "built-in profile: toy or paper-defaults");
    auto* out = cmd->add_option("--out", c.out, "output directory");
    if (needs_out) out->required();
    cmd->add_option("--threads", c.threads, "worker cap for per-target work")->check(CLI::PositiveNumber);
}

RunConfig resolve(const Common& c) {
    RunConfig rc = c.config.empty() ? RunConfig::preset(c.profile) : load_run_config(c.config);
    rc.validate();
    return rc;
}

void prepare_out(const Common& c) { fs::create_directories(c.out); }

void write_json(const fs::path& path, const Json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

Json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open " + path.string());
    try {
        return Json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptInput(path.string() + ": " + e.what());
    }
}

std::vector<SceneRecord> load_scenes(const fs::path& manifest) {
    if (!fs::exists(manifest)) throw std::invalid_argument("manifest not found: " + manifest.string());
    ShardReadReport report = read_shards(manifest);
    for (const auto& e : report.errors) spdlog::error("{}", e);
    if (!report.errors.empty())
        throw CorruptInput(std::to_string(report.errors.size()) + " unreadable record(s) in " + manifest.string());
    return std::move(report.scenes);
}

const SceneRecord& find_scene(const std::vector<SceneRecord>& scenes, const std::string& id) {
    for (const auto& s : scenes)
        if (s.id == id) return s;
    throw std::invalid_argument("scene '" + id + "' is not in the manifest");
}

TaskId parse_task(const std::string& name) {
    if (name == "rgb") return TaskId::Rgb;
    if (name == "depth") return TaskId::Depth;
    throw std::invalid_argument("unknown task '" + name + "'");
}

// ---------------------------------------------------------------------------------------------

struct GenArgs {
    Common common;
    std::optional<std::uint64_t> seed;
    std::optional<int> count, frames, width, height;
    std::optional<std::string> layout;
};

int cmd_gen(const GenArgs& a) {
    RunConfig rc = resolve(a.common);
    if (a.seed) rc.seed = *a.seed;
    if (a.count) rc.data.num_scenes = *a.count;
    if (a.frames) rc.data.num_frames = *a.frames;
    if (a.width) rc.data.width = *a.width;
    if (a.height) rc.data.height = *a.height;
    if (a.layout) rc.data.layout = parse_layout(*a.layout);
    rc.validate();
    prepare_out(a.common);

    std::vector<SceneRecord> scenes;
    for (int k = 0; k < rc.data.num_scenes; ++k) {
        SyntheticSpec spec;
        spec.seed = mix_seed(rc.seed, static_cast<std::uint64_t>(k));
        spec.num_frames = rc.data.num_frames;
        spec.width = rc.data.width;
        spec.height = rc.data.height;
        spec.layout = rc.data.layout;
        spec.fov_degrees = rc.data.fov_degrees;
        spec.id = "scene-" + std::to_string(k);
        scenes.push_back(generate_synthetic_scene(spec));
        spdlog::info("generated {} ({} frames)", spec.id, spec.num_frames);
    }
    const auto entries = write_shards(scenes, a.common.out);
    save_run_config((fs::path(a.common.out) / "config.json").string(), rc);
    spdlog::info("wrote {} records to {}", entries.size(), a.common.out);
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct CurateArgs {
    Common common;
    std::string manifest;
    std::string task = "both";
    std::optional<double> p_min;
    std::optional<std::uint64_t> seed;
    int holdout = 0;
};

int cmd_curate(const CurateArgs& a) {
    RunConfig rc = resolve(a.common);
    if (a.p_min) rc.curation.p_min = *a.p_min;
    if (a.seed) rc.seed = *a.seed;
    rc.curation.validate();
    if (a.holdout < 0) throw std::invalid_argument("--holdout must be non-negative");
    std::vector<TaskId> tasks;
    if (a.task == "both") tasks = {TaskId::Rgb, TaskId::Depth};
    else tasks = {parse_task(a.task)};

    const auto scenes = load_scenes(a.manifest);
    prepare_out(a.common);
    // Frames with index % holdout == holdout - 1 stay out of every pair, as target or view.
    auto held = [&](int f) { return a.holdout > 0 && f % a.holdout == a.holdout - 1; };
    std::vector<CuratedSample> out;
    for (std::size_t s = 0; s < scenes.size(); ++s)
        for (TaskId task : tasks) {
            const std::uint64_t seed = mix_seed(mix_seed(rc.seed, s), static_cast<std::uint64_t>(task));
            for (auto& sample : curate_pairs(scenes[s], rc.curation, task, seed)) {
                bool skip = held(sample.target);
                for (int c : sample.conditioning) skip |= held(c);
                if (!skip) out.push_back(std::move(sample));
            }
        }
    write_pair_manifest(fs::path(a.common.out) / "pairs.jsonl", out);
    save_run_config((fs::path(a.common.out) / "config.json").string(), rc);
    spdlog::info("curated {} samples from {} scene(s)", out.size(), scenes.size());
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct TrainArgs {
    Common common;
    std::string manifest, pairs, resume, init;
    std::optional<std::int64_t> steps;
    std::optional<std::int64_t> stop_at;
    std::optional<std::uint64_t> seed;
    std::int64_t save_every = 0;
    std::int64_t log_every = 50;
};

int cmd_train(const TrainArgs& a) {
    if (!a.resume.empty() && !a.init.empty()) throw std::invalid_argument("--resume and --init are exclusive");
    RunConfig rc = resolve(a.common);
    if (a.seed) rc.seed = *a.seed, rc.train.seed = *a.seed;
    if (a.steps) rc.train.steps = *a.steps;
    rc.train.validate();

    std::optional<Trainer> trainer;
    if (!a.resume.empty()) {
        trainer.emplace(Trainer::load(a.resume));
        if (a.steps && *a.steps < trainer->steps_done())
            throw std::invalid_argument("--steps is below the checkpoint's step count");
        rc.model = trainer->model().config();
        rc.pipeline = trainer->pipeline();
        rc.train = trainer->train_config();
        if (a.steps) rc.train.steps = *a.steps;
    } else if (!a.init.empty()) {
        // Warm start: weights and EMA from the checkpoint, fresh optimizer and schedule.
        const Trainer src = Trainer::load(a.init);
        rc.model = src.model().config();
        rc.pipeline = src.pipeline();
        trainer.emplace(src.model(), rc.pipeline, rc.train);
        trainer->ema().shadow() = src.ema().shadow();
    } else {
        trainer.emplace(RinModel<float>(rc.model, rc.train.seed), rc.pipeline, rc.train);
    }
    trainer->set_schedule_horizon(std::max(trainer->schedule_horizon(), rc.train.steps));
    rc.validate();

    const auto scenes = load_scenes(a.manifest);
    std::vector<CuratedSample> samples;
    try {
        samples = read_pair_manifest(a.pairs);
    } catch (const DataError& e) {
        throw CorruptInput(e.what());
    }
    const TrainingData data(scenes, samples);
    prepare_out(a.common);
    const fs::path dir(a.common.out);
    save_run_config((dir / "config.json").string(), rc);

    std::ofstream log(dir / "train.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
    const auto t0 = std::chrono::steady_clock::now();
    std::int64_t until = rc.train.steps;
    if (a.stop_at) {
        if (*a.stop_at < trainer->steps_done() || *a.stop_at > until)
            throw std::invalid_argument("--stop-at must lie between the current step and --steps");
        until = *a.stop_at;
    }
    trainer->run(data, until, [&](const StepStats& s) {
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << log_line(s, rc.train.ema_decay, wall) << '\n';
        if (a.log_every > 0 && (s.step + 1) % a.log_every == 0)
            spdlog::info("step {} loss {:.4f} rgb {:.4f} depth {:.4f} lr {:.2e}", s.step + 1, s.loss.total,
                         s.loss.rgb, s.loss.depth, s.lr);
        if (a.save_every > 0 && (s.step + 1) % a.save_every == 0) trainer->save(dir / kCheckpointName);
    });
    trainer->save(dir / kCheckpointName);
    spdlog::info("saved {} at step {}", (dir / kCheckpointName).string(), trainer->steps_done());
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct ExpandArgs {
    Common common;
    std::string checkpoint;
    int times = 1;
    double jitter = 0;
    std::uint64_t seed = 0;
};

int cmd_expand(const ExpandArgs& a) {
    if (a.times < 1) throw std::invalid_argument("--times must be at least 1");
    if (a.jitter < 0) throw std::invalid_argument("--jitter must be non-negative");
    RunConfig rc = resolve(a.common);
    Trainer t = Trainer::load(a.checkpoint);
    const RinModel<float> before = t.ema_model();
    for (int i = 0; i < a.times; ++i) t = t.expanded(a.jitter, mix_seed(a.seed, static_cast<std::uint64_t>(i)));
    const double diff = probe_output_difference(before, t.ema_model(), t.pipeline(), a.seed);
    spdlog::info("latents {} -> {}; output preservation max |diff| = {:.3e}", before.config().num_latents,
                 t.model().config().num_latents, diff);

    rc.model = t.model().config();
    rc.pipeline = t.pipeline();
    rc.train = t.train_config();
    prepare_out(a.common);
    const fs::path dir(a.common.out);
    t.save(dir / kCheckpointName);
    save_run_config((dir / "config.json").string(), rc);
    write_json(dir / "expand_report.json", {{"source", a.checkpoint},
                                            {"latents_before", before.config().num_latents},
                                            {"latents_after", t.model().config().num_latents},
                                            {"jitter", a.jitter},
                                            {"max_abs_output_difference", diff}});
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct SampleArgs {
    Common common;
    std::string checkpoint, manifest, scene;
    std::vector<int> views, targets;
    std::string task = "both";
    std::optional<int> ensemble, eval_steps;
    std::optional<std::uint64_t> seed;
    bool incremental = false;
};

std::string stem_of(const std::string& scene, int frame) { return scene + "_" + std::to_string(frame); }

int cmd_sample(const SampleArgs& a) {
    RunConfig rc = resolve(a.common);
    if (a.ensemble) rc.inference.ensemble = *a.ensemble;
    if (a.eval_steps) rc.inference.eval_steps = *a.eval_steps;
    if (a.seed) rc.inference.seed = *a.seed;
    if (a.task != "both" && a.task != "rgb" && a.task != "depth") throw std::invalid_argument("unknown task " + a.task);
    if (a.views.empty() || a.targets.empty()) throw std::invalid_argument("--views and --targets are required");

    const LoadedModel lm = load_model(a.checkpoint);
    rc.model = lm.model.config();
    rc.pipeline = lm.pipeline;
    rc.validate();
    const auto scenes = load_scenes(a.manifest);
    const SceneRecord& scene = find_scene(scenes, a.scene);
    auto frame = [&](int f) -> const Frame& {
        if (f < 0 || f >= static_cast<int>(scene.frames.size()))
            throw std::invalid_argument("frame " + std::to_string(f) + " is out of range for " + scene.id);
        return scene.frames[static_cast<std::size_t>(f)];
    };

    GenerationRequest req;
    for (int v : a.views) req.conditioning.push_back({to_float(frame(v).image), frame(v).camera});
    for (int t : a.targets) req.targets.push_back(frame(t).camera);
    req.rgb = a.task != "depth";
    req.depth = a.task != "rgb";
    req.incremental = a.incremental;
    req.options = rc.inference;
    req.validate();

    std::vector<TargetResult> results;
    if (a.incremental || a.common.threads <= 1 || req.targets.size() == 1) {
        results = generate(lm.model, rc.pipeline, req);
    } else {
        results.resize(req.targets.size());
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        auto worker = [&] {
            for (std::size_t i; (i = next++) < req.targets.size();) {
                try {
                    results[i] = synthesize_target(lm.model, rc.pipeline, req.conditioning, req.targets[i], req.rgb,
                                                   req.depth, req.options, i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        };
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(a.common.threads), req.targets.size());
        std::vector<std::thread> pool;
        for (std::size_t k = 0; k < n; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        if (failure) std::rethrow_exception(failure);
    }

    // Fixed conditioning reads min(M_s, cells) tokens from every requested view.
    std::size_t expected_tokens = 0;
    for (const auto& v : req.conditioning)
        expected_tokens += std::min<std::size_t>(static_cast<std::size_t>(rc.pipeline.scene_tokens),
                                                 token_grid(v.image.width, v.image.height).valid_cells.size());

    prepare_out(a.common);
    const fs::path dir(a.common.out);
    PointCloud merged;
    Json targets = Json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
        const TargetResult& r = results[i];
        if (!a.incremental && (r.conditioning_views != a.views.size() || r.scene_tokens != expected_tokens))
            throw std::logic_error("target " + std::to_string(a.targets[i]) + " read " +
                                   std::to_string(r.scene_tokens) + " scene tokens, expected " +
                                   std::to_string(expected_tokens));
        write_target_outputs(dir, stem_of(scene.id, a.targets[i]), r);
        merged.append(r.cloud);
        targets.push_back({{"frame", a.targets[i]},
                           {"stem", stem_of(scene.id, a.targets[i])},
                           {"conditioning_views", r.conditioning_views},
                           {"scene_tokens", r.scene_tokens},
                           {"rgb_evaluations", r.rgb_evaluations},
                           {"depth_evaluations", r.depth_evaluations},
                           {"scale", r.scale}});
    }
    write_ply((dir / "cloud.ply").string(), merged);
    write_json(dir / "request.json", {{"checkpoint", a.checkpoint},
                                      {"manifest", fs::absolute(a.manifest).string()},
                                      {"scene", scene.id},
                                      {"views", a.views},
                                      {"task", a.task},
                                      {"incremental", a.incremental},
                                      {"options", to_json(rc.inference)},
                                      {"targets", targets}});
    save_run_config((dir / "config.json").string(), rc);
    spdlog::info("wrote {} target(s) to {}", results.size(), dir.string());
    return 0;
}

// ---------------------------------------------------------------------------------------------

struct EvalArgs {
    Common common;
    std::string pred;
    std::string manifest;
};

int cmd_eval(const EvalArgs& a) {
    const fs::path pred(a.pred);
    const Json request = read_json(pred / "request.json");
    std::string manifest = a.manifest;
    try {
        if (manifest.empty()) manifest = request.at("manifest").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptInput("request.json: " + std::string(e.what()));
    }
    const auto scenes = load_scenes(manifest);
    std::vector<FrameMetrics> frames;
    try {
        const SceneRecord& scene = find_scene(scenes, request.at("scene").get<std::string>());
        for (const auto& t : request.at("targets")) {
            const int f = t.at("frame").get<int>();
            const std::string stem = t.at("stem").get<std::string>();
            if (f < 0 || f >= static_cast<int>(scene.frames.size())) throw CorruptInput("target frame out of range");
            const Frame& gt = scene.frames[static_cast<std::size_t>(f)];
            FrameMetrics m;
            m.name = stem;
            if (fs::exists(pred / (stem + ".png")))
                m.image = image_metrics(to_float(read_png((pred / (stem + ".png")).string())), to_float(gt.image));
            if (gt.depth && fs::exists(pred / (stem + "_depth.raw")))
                m.depth = depth_metrics(read_depth_raw((pred / (stem + "_depth.raw")).string()), *gt.depth);
            frames.push_back(std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptInput("request.json: " + std::string(e.what()));
    }
    const Json report = metrics_report(frames);
    const fs::path out = a.common.out.empty() ? pred : fs::path(a.common.out);
    fs::create_directories(out);
    write_json(out / "metrics.json", report);
    spdlog::info("metrics for {} frame(s) written to {}", frames.size(), (out / "metrics.json").string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_st("raydiff"));
    spdlog::set_pattern("[%H:%M:%S] [%l] %v");

    CLI::App app{"raydiff: posed-image diffusion for novel views and depth"};
    app.require_subcommand(1);
    app.fallthrough();
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "only log warnings and errors");

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "render synthetic scenes into shards");
    add_common(g, gen.common);
    g->add_option("--seed", gen.seed);
    g->add_option("--count", gen.count, "number of scenes");
    g->add_option("--frames", gen.frames, "frames per scene");
    g->add_option("--width", gen.width);
    g->add_option("--height", gen.height);
    g->add_option("--layout", gen.layout, "orbit or room");

    CurateArgs cur;
    auto* c = app.add_subcommand("curate", "select conditioning sets for every target frame");
    add_common(c, cur.common);
    c->add_option("--manifest", cur.manifest)->required();
    c->add_option("--task", cur.task, "rgb, depth or both");
    c->add_option("--p-min", cur.p_min, "overlap threshold");
    c->add_option("--seed", cur.seed);
    c->add_option("--holdout", cur.holdout, "exclude frames with index % N == N-1");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train or resume a model");
    add_common(t, tr.common);
    t->add_option("--manifest", tr.manifest)->required();
    t->add_option("--pairs", tr.pairs)->required();
    t->add_option("--steps", tr.steps, "total optimizer steps");
    t->add_option("--stop-at", tr.stop_at, "stop early without changing the schedule horizon");
    t->add_option("--seed", tr.seed);
    t->add_option("--resume", tr.resume, "continue a checkpoint bit-for-bit")->check(CLI::ExistingFile);
    t->add_option("--init", tr.init, "start from a checkpoint's weights with a fresh optimizer")
        ->check(CLI::ExistingFile);
    t->add_option("--save-every", tr.save_every);
    t->add_option("--log-every", tr.log_every);

    ExpandArgs ex;
    auto* e = app.add_subcommand("expand", "duplicate the latent tokens of a checkpoint");
    add_common(e, ex.common);
    e->add_option("--checkpoint", ex.checkpoint)->required()->check(CLI::ExistingFile);
    e->add_option("--times", ex.times, "number of doublings");
    e->add_option("--jitter", ex.jitter, "std of noise added to the new latent copy");
    e->add_option("--seed", ex.seed);

    SampleArgs sa;
    auto* s = app.add_subcommand("sample", "generate target views and depth");
    add_common(s, sa.common);
    s->add_option("--checkpoint", sa.checkpoint)->required()->check(CLI::ExistingFile);
    s->add_option("--manifest", sa.manifest)->required();
    s->add_option("--scene", sa.scene)->required();
    s->add_option("--views", sa.views, "conditioning frame indices")->required();
    s->add_option("--targets", sa.targets, "target frame indices")->required();
    s->add_option("--task", sa.task, "rgb, depth or both");
    s->add_option("--ensemble", sa.ensemble);
    s->add_option("--eval-steps", sa.eval_steps);
    s->add_option("--seed", sa.seed);
    s->add_flag("--incremental", sa.incremental, "condition later targets on generated ones");

    EvalArgs ev;
    auto* v = app.add_subcommand("eval", "score saved outputs against ground truth");
    add_common(v, ev.common, false);
    v->add_option("--pred", ev.pred, "directory written by sample")->required()->check(CLI::ExistingDirectory);
    v->add_option("--manifest", ev.manifest, "defaults to the manifest recorded by sample");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }
    if (quiet) spdlog::set_level(spdlog::level::warn);

    try {
        if (*g) return cmd_gen(gen);
        if (*c) return cmd_curate(cur);
        if (*t) return cmd_train(tr);
        if (*e) return cmd_expand(ex);
        if (*s) return cmd_sample(sa);
        if (*v) return cmd_eval(ev);
    } catch (const CheckpointError& err) {
        spdlog::error("{}", err.what());
        return 3;
    } catch (const ShardError& err) {
        spdlog::error("{}", err.what());
        return 3;
    } catch (const CorruptInput& err) {
        spdlog::error("{}", err.what());
        return 3;
    } catch (const ImageIoError& err) {
        spdlog::error("{}", err.what());
        return 3;
    } catch (const ConfigError& err) {
        spdlog::error("{}", err.what());
        return 2;
    } catch (const DataError& err) {
        spdlog::error("{}", err.what());
        return 2;
    } catch (const std::invalid_argument& err) {
        spdlog::error("{}", err.what());
        return 2;
    } catch (const TrainingError& err) {
        spdlog::error("{}", err.what());
        return 2;
    } catch (const InferenceError& err) {
        spdlog::error("{}", err.what());
        return 2;
    } catch (const std::exception& err) {
        spdlog::error("{}", err.what());
        return 1;
    }
    return 1;
}
