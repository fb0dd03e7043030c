#include "raydiff/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace raydiff {

void CurationConfig::validate() const {
    if (!(c_min_frac >= 0.0 && c_min_frac < c_max_frac)) throw DataError("curation: need 0 <= c_min_frac < c_max_frac");
    if (!(t_min < t_max)) throw DataError("curation: need t_min < t_max");
    if (!(p_min >= 0.0 && p_min <= 1.0)) throw DataError("curation: p_min must lie in [0, 1]");
    if (!(alpha_min >= 0.0 && alpha_min <= alpha_max_depth && alpha_min <= alpha_max_image))
        throw DataError("curation: need 0 <= alpha_min <= alpha_max");
    if (min_views < 1 || max_views < min_views) throw DataError("curation: need 1 <= min_views <= max_views");
    if (sets_per_target < 1) throw DataError("curation: sets_per_target must be positive");
}

double max_camera_distance(const SceneRecord& scene) {
    double c_M = 0.0;
    for (std::size_t i = 0; i < scene.frames.size(); ++i)
        for (std::size_t j = i + 1; j < scene.frames.size(); ++j)
            c_M = std::max(c_M, (scene.frames[i].camera.center() - scene.frames[j].camera.center()).norm());
    return c_M;
}

bool pair_valid(const SceneRecord& scene, int c, int t, const CurationConfig& cfg, TaskId task, double c_M) {
    if (c == t) return false;
    const Frame& fc = scene.frames.at(c);
    const Frame& ft = scene.frames.at(t);

    const double dist = (fc.camera.center() - ft.camera.center()).norm();
    if (!(dist > cfg.c_min_frac * c_M && dist < cfg.c_max_frac * c_M)) return false;
    if (scene.dynamic) {
        const double gap = fc.timestep - ft.timestep;
        if (!(gap > cfg.t_min && gap < cfg.t_max)) return false;
    }

    const double cos_angle = std::clamp(fc.camera.forward().dot(ft.camera.forward()), -1.0, 1.0);
    const double angle = std::acos(cos_angle);
    const double alpha_max = task == TaskId::Depth ? cfg.alpha_max_depth : cfg.alpha_max_image;
    if (!(angle >= cfg.alpha_min && angle <= alpha_max)) return false;

    if (fc.depth) {
        std::size_t valid = 0;
        for (float d : fc.depth->data) valid += valid_depth(d);
        if (valid == 0) return false;
        const Overlap o = overlap_fraction(fc.camera, *fc.depth, ft.camera);
        if (o.fraction < cfg.p_min || o.count < cfg.min_valid) return false;
    }
    return true;
}

std::vector<std::vector<int>> valid_partners(const SceneRecord& scene, const CurationConfig& cfg, TaskId task) {
    cfg.validate();
    const double c_M = max_camera_distance(scene);
    const int n = static_cast<int>(scene.frames.size());
    std::vector<std::vector<int>> partners(n);
    for (int t = 0; t < n; ++t)
        for (int c = 0; c < n; ++c)
            if (pair_valid(scene, c, t, cfg, task, c_M)) partners[t].push_back(c);
    return partners;
}

std::vector<CuratedSample> curate_pairs(const SceneRecord& scene, const CurationConfig& cfg, TaskId task,
                                        std::uint64_t seed) {
    const auto partners = valid_partners(scene, cfg, task);
    std::mt19937_64 rng(seed);
    std::vector<CuratedSample> out;
    for (int t = 0; t < static_cast<int>(partners.size()); ++t) {
        const auto& pool = partners[t];
        if (static_cast<int>(pool.size()) < cfg.min_views) continue;
        const int largest = std::min<int>(cfg.max_views, static_cast<int>(pool.size()));
        std::uniform_int_distribution<int> size(cfg.min_views, largest);
        std::set<std::vector<int>> seen;
        // Bounded retries: small pools may not have sets_per_target distinct subsets.
        for (int attempt = 0; attempt < 8 * cfg.sets_per_target && static_cast<int>(seen.size()) < cfg.sets_per_target;
             ++attempt) {
            std::vector<int> draw = pool;
            std::shuffle(draw.begin(), draw.end(), rng);
            draw.resize(size(rng));
            std::sort(draw.begin(), draw.end());
            if (!seen.insert(draw).second) continue;
            out.push_back({scene.id, t, draw, task});
        }
    }
    return out;
}

}  // namespace raydiff
