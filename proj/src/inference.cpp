#include "raydiff/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "raydiff/image_io.hpp"
#include "raydiff/ssn.hpp"
#include "raydiff/tokens.hpp"
#include "raydiff/training.hpp"

namespace raydiff {

void GenerationRequest::validate() const {
    if (conditioning.empty()) throw std::invalid_argument("generation request needs at least one conditioning view");
    if (targets.empty()) throw std::invalid_argument("generation request needs at least one target");
    if (!rgb && !depth) throw std::invalid_argument("generation request selects no task");
    if (options.ensemble < 1) throw std::invalid_argument("ensemble size must be at least 1");
    if (options.eval_steps < 1) throw std::invalid_argument("eval_steps must be at least 1");
    if (incremental && !rgb) throw std::invalid_argument("incremental conditioning needs the rgb task");
    for (const auto& v : conditioning)
        if (v.image.width != v.camera.width() || v.image.height != v.camera.height() || v.image.channels != 3)
            throw std::invalid_argument("conditioning image does not match its camera");
}

namespace {

struct TaskRun {
    StateMatrix state;  // H*W x kStateColumns, median over the ensemble
    std::size_t evaluations = 0;
};

TaskRun run_task(const RinModel<float>& model, const PipelineConfig& pipeline, const nn::Matrix<float>& scene_tokens,
                 const RayEmbedding& target_rays, TaskId task, const InferenceOptions& options,
                 std::uint64_t target_seed) {
    const NoiseSchedule schedule(pipeline.schedule_steps);
    const auto n = static_cast<Eigen::Index>(target_rays.width) * target_rays.height;
    StateMatrix mask = StateMatrix::Zero(n, kStateColumns);
    if (task == TaskId::Rgb)
        mask.leftCols(3).setOnes();
    else
        mask.col(kDepthColumn).setOnes();

    TaskRun run;
    std::vector<StateMatrix> members;
    for (int e = 0; e < options.ensemble; ++e) {
        const std::uint64_t member_seed =
            mix_seed(target_seed, 2 * static_cast<std::uint64_t>(e) + (task == TaskId::Rgb ? 0 : 1));
        // Pixels are split into random chunks of at most M_p so each evaluation sees a read
        // context of the size used in training.
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 chunk_rng(mix_seed(member_seed, 1));
        std::shuffle(order.begin(), order.end(), chunk_rng);
        const std::size_t M = static_cast<std::size_t>(pipeline.prediction_tokens);
        std::vector<PredictionInput> chunks;
        for (std::size_t start = 0; start < order.size(); start += M) {
            std::vector<int> px(order.begin() + start, order.begin() + std::min(order.size(), start + M));
            std::vector<TaskId> tasks(px.size(), task);
            nn::Matrix<float> zero = nn::Matrix<float>::Zero(static_cast<Eigen::Index>(px.size()), kStateColumns);
            chunks.push_back(make_prediction_input(target_rays, std::move(px), std::move(tasks), std::move(zero)));
        }
        const Denoiser denoiser = [&](const StateMatrix& x, int t) {
            StateMatrix eps(x.rows(), x.cols());
            for (auto& chunk : chunks) {
                for (std::size_t i = 0; i < chunk.pixels.size(); ++i)
                    chunk.state.row(static_cast<Eigen::Index>(i)) = x.row(chunk.pixels[i]).cast<float>();
                const nn::Matrix<float> out = model.forward_with_scene(scene_tokens, chunk, t);
                for (std::size_t i = 0; i < chunk.pixels.size(); ++i)
                    eps.row(chunk.pixels[i]) = out.row(static_cast<Eigen::Index>(i)).cast<double>();
                ++run.evaluations;
            }
            return eps;
        };
        members.push_back(ddim_sample(schedule, denoiser, mask, {options.eval_steps, options.clip_x0}, member_seed));
    }
    run.state = elementwise_median(members);
    return run;
}

}  // namespace

TargetResult synthesize_target(const RinModel<float>& model, const PipelineConfig& pipeline,
                               const std::vector<PosedImage>& conditioning, const Camera& target, bool rgb,
                               bool depth, const InferenceOptions& options, std::size_t target_index) {
    try {
        std::vector<Camera> cams;
        for (const auto& v : conditioning) cams.push_back(v.camera);
        const NormalizedScene ns =
            normalize_scene(cams, target, nullptr, pipeline.depth_range.d_max, DegeneratePolicy::Clamp);

        const std::uint64_t target_seed = mix_seed(options.seed, static_cast<std::uint64_t>(target_index));
        std::mt19937_64 token_rng(mix_seed(target_seed, 0xC0FFEE));
        SceneInput scene;
        for (std::size_t i = 0; i < conditioning.size(); ++i)
            scene.views.push_back(make_conditioning_view(encode_rgb(conditioning[i].image, RangePolicy::Clamp),
                                                         ns.conditioning[i], pipeline.rays,
                                                         static_cast<std::size_t>(pipeline.scene_tokens), token_rng));
        const nn::Matrix<float> scene_tokens = model.embed_scene(scene);
        const RayEmbedding target_rays = encode_rays(compute_raymap(ns.target), pipeline.rays);

        TargetResult result;
        result.scale = ns.scale;
        result.conditioning_views = conditioning.size();
        result.scene_tokens = static_cast<std::size_t>(scene_tokens.rows());
        const int W = target.width(), H = target.height();
        if (rgb) {
            const TaskRun r = run_task(model, pipeline, scene_tokens, target_rays, TaskId::Rgb, options, target_seed);
            ImageF img(W, H, 3);
            for (Eigen::Index p = 0; p < r.state.rows(); ++p)
                for (int c = 0; c < 3; ++c)
                    img.data[static_cast<std::size_t>(p) * 3 + c] =
                        static_cast<float>(std::clamp(decode_rgb_value(r.state(p, c)), 0.0, 1.0));
            result.image = std::move(img);
            result.rgb_evaluations = r.evaluations;
        }
        if (depth) {
            const TaskRun r = run_task(model, pipeline, scene_tokens, target_rays, TaskId::Depth, options, target_seed);
            DepthMap d(W, H);
            for (Eigen::Index p = 0; p < r.state.rows(); ++p)
                d.data[p] = static_cast<float>(decode_depth_value(r.state(p, kDepthColumn), ns.scale, pipeline.depth_range));
            result.depth = std::move(d);
            result.depth_evaluations = r.evaluations;
            // Lift in the target frame, then move to the world frame with T_t^-1.
            const Camera local = target.with_extrinsics(Mat4::Identity());
            const PointCloud pc = unproject(result.image ? *result.image : ImageF(), *result.depth, local,
                                            depth_validity(*result.depth));
            result.cloud = pc.transformed(rigid_inverse(target.T()));
        }
        return result;
    } catch (const InferenceError&) {
        throw;
    } catch (const std::exception& e) {
        throw InferenceError(target_index, e.what());
    }
}

std::vector<TargetResult> synthesize(const RinModel<float>& model, const PipelineConfig& pipeline,
                                     const GenerationRequest& request) {
    request.validate();
    std::vector<TargetResult> out;
    for (std::size_t i = 0; i < request.targets.size(); ++i)
        out.push_back(synthesize_target(model, pipeline, request.conditioning, request.targets[i], request.rgb,
                                        request.depth, request.options, i));
    return out;
}

std::vector<std::size_t> incremental_order(const std::vector<PosedImage>& conditioning,
                                           const std::vector<Camera>& targets) {
    std::vector<double> dist(targets.size(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < targets.size(); ++i)
        for (const auto& c : conditioning)
            dist[i] = std::min(dist[i], (targets[i].center() - c.camera.center()).norm());
    std::vector<std::size_t> order(targets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    return order;
}

std::vector<TargetResult> synthesize_incremental(const RinModel<float>& model, const PipelineConfig& pipeline,
                                                 const GenerationRequest& request) {
    request.validate();
    if (!request.rgb) throw std::invalid_argument("incremental conditioning needs the rgb task");
    std::vector<PosedImage> pool = request.conditioning;
    std::vector<TargetResult> out(request.targets.size());
    for (std::size_t i : incremental_order(request.conditioning, request.targets)) {
        out[i] = synthesize_target(model, pipeline, pool, request.targets[i], true, request.depth, request.options, i);
        pool.push_back({*out[i].image, request.targets[i]});
    }
    return out;
}

std::vector<TargetResult> generate(const RinModel<float>& model, const PipelineConfig& pipeline,
                                   const GenerationRequest& request) {
    return request.incremental ? synthesize_incremental(model, pipeline, request)
                               : synthesize(model, pipeline, request);
}

// ---------------------------------------------------------------------------------------------

ImageMetrics image_metrics(const ImageF& pred, const ImageF& gt) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("image_metrics: shape mismatch");
    if (gt.data.empty()) throw std::invalid_argument("image_metrics: empty image");
    double se = 0;
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const double d = static_cast<double>(pred.data[i]) - gt.data[i];
        se += d * d;
    }
    ImageMetrics m;
    m.mse = se / static_cast<double>(gt.data.size());
    if (m.mse > 0.0) m.psnr = 10.0 * std::log10(1.0 / m.mse);
    return m;
}

std::optional<DepthMetrics> depth_metrics(const DepthMap& pred, const DepthMap& gt, const Mask* mask) {
    if (!pred.same_extent(gt)) throw std::invalid_argument("depth_metrics: shape mismatch");
    if (mask && !mask->same_extent(gt)) throw std::invalid_argument("depth_metrics: mask shape mismatch");
    DepthMetrics m;
    double abs_rel = 0, sq_rel = 0, se = 0, hits = 0;
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const double g = gt.data[i];
        if (!valid_depth(gt.data[i]) || (mask && !mask->data[i])) continue;
        const double p = pred.data[i];
        const double d = p - g;
        abs_rel += std::abs(d) / g;
        sq_rel += d * d / g;
        se += d * d;
        if (p > 0.0 && std::max(p / g, g / p) < 1.25) hits += 1;
        ++m.valid;
    }
    if (m.valid == 0) return std::nullopt;
    const double n = static_cast<double>(m.valid);
    m.abs_rel = abs_rel / n;
    m.sq_rel = sq_rel / n;
    m.rmse = std::sqrt(se / n);
    m.delta_125 = hits / n;
    return m;
}

nlohmann::json metrics_report(const std::vector<FrameMetrics>& frames) {
    using nlohmann::json;
    json per = json::array();
    double psnr = 0, abs_rel = 0, sq_rel = 0, rmse = 0, delta = 0;
    std::size_t n_psnr = 0, n_inf = 0, n_image = 0, n_depth = 0, n_depth_empty = 0;
    for (const auto& f : frames) {
        json j = {{"name", f.name}};
        if (f.image) {
            ++n_image;
            j["mse"] = f.image->mse;
            if (f.image->psnr) {
                j["psnr"] = *f.image->psnr;
                psnr += *f.image->psnr;
                ++n_psnr;
            } else {
                j["psnr"] = nullptr;
                j["psnr_infinite"] = true;
                ++n_inf;
            }
        }
        if (f.depth) {
            ++n_depth;
            j["abs_rel"] = f.depth->abs_rel;
            j["sq_rel"] = f.depth->sq_rel;
            j["rmse"] = f.depth->rmse;
            j["delta_1.25"] = f.depth->delta_125;
            j["valid_pixels"] = f.depth->valid;
            abs_rel += f.depth->abs_rel;
            sq_rel += f.depth->sq_rel;
            rmse += f.depth->rmse;
            delta += f.depth->delta_125;
        } else {
            j["depth"] = nullptr;
            ++n_depth_empty;
        }
        per.push_back(std::move(j));
    }
    json agg = {{"frames", frames.size()}};
    if (n_image) {
        agg["psnr"] = n_psnr ? json(psnr / n_psnr) : json(nullptr);
        agg["psnr_frames"] = n_psnr;
        agg["psnr_infinite_frames"] = n_inf;
    }
    if (n_depth) {
        agg["abs_rel"] = abs_rel / n_depth;
        agg["sq_rel"] = sq_rel / n_depth;
        agg["rmse"] = rmse / n_depth;
        agg["delta_1.25"] = delta / n_depth;
        agg["depth_frames"] = n_depth;
    }
    return {{"frames", per}, {"aggregate", agg}};
}

void write_target_outputs(const std::filesystem::path& dir, const std::string& stem, const TargetResult& r) {
    std::filesystem::create_directories(dir);
    if (r.image) write_png((dir / (stem + ".png")).string(), to_bytes(*r.image));
    if (r.depth) {
        write_depth_raw((dir / (stem + "_depth.raw")).string(), *r.depth);
        float lo = std::numeric_limits<float>::infinity(), hi = 0.0f;
        for (float d : r.depth->data)
            if (valid_depth(d)) lo = std::min(lo, d), hi = std::max(hi, d);
        if (!(hi > lo)) lo = 0.0f, hi = std::max(hi, 1.0f);
        write_png16((dir / (stem + "_depth.png")).string(), depth_preview(*r.depth, lo, hi));
        write_ply((dir / (stem + ".ply")).string(), r.cloud);
    }
}

}  // namespace raydiff
