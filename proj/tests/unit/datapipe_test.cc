#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "data_fixtures.hpp"
#include "fixtures.hpp"
#include "raydiff/datapipe.hpp"
#include "raydiff/diffusion.hpp"

namespace raydiff {
namespace {

namespace fs = std::filesystem;
using testing::reference_lift;
using testing::reference_project;
using testing::brute_force_partners;
using testing::frames_equal;
using testing::random_scene;
using testing::two_camera_scene;

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("raydiff_datapipe_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------------------------------------
// Synthetic scenes

TEST(SyntheticTest, DeterministicForSeed) {
    const SyntheticSpec spec{7, 12, 16, 16, Layout::Orbit};
    const SceneRecord a = generate_synthetic_scene(spec);
    const SceneRecord b = generate_synthetic_scene(spec);
    ASSERT_EQ(a.frames.size(), 12u);
    EXPECT_EQ(a.id, b.id);
    for (std::size_t i = 0; i < a.frames.size(); ++i) EXPECT_TRUE(frames_equal(a.frames[i], b.frames[i])) << i;
    const SceneRecord c = generate_synthetic_scene({8, 12, 16, 16, Layout::Orbit});
    EXPECT_FALSE(a.frames[0].image == c.frames[0].image);
}

TEST(SyntheticTest, RejectsResolutionNotDivisibleByFour) {
    EXPECT_THROW(generate_synthetic_scene({1, 2, 30, 32, Layout::Orbit}), DataError);
    EXPECT_THROW(generate_synthetic_scene({1, 2, 32, 0, Layout::Room}), DataError);
}

TEST(SyntheticTest, FrontoParallelPlaneDepthIsExact) {
    SyntheticWorld w;
    Primitive plane;
    plane.kind = Primitive::Kind::Quad;
    plane.axis = 2;
    plane.center = Vec3(0, 0, 2);
    plane.half = Vec3(50, 50, 0);
    w.primitives.push_back(plane);
    const Camera cam = Camera::from_fov(20, 20, 16, 16, Mat4::Identity(), 32, 32);
    const RenderResult r = w.render(cam);
    EXPECT_EQ(r.depth.at(16, 16), 2.0f);
    for (float d : r.depth.data) EXPECT_EQ(d, 2.0f);
}

TEST(SyntheticTest, CamerasOutsideGeometryAndDepthMatchesGeometry) {
    for (Layout layout : {Layout::Orbit, Layout::Room}) {
        const SyntheticSpec spec{21, 24, 32, 32, layout};
        const SyntheticLayout lay = synthetic_layout(spec);
        const SceneRecord scene = generate_synthetic_scene(spec);
        ASSERT_EQ(scene.frames.size(), 24u);
        std::size_t valid = 0;
        for (std::size_t i = 0; i < scene.frames.size(); ++i) {
            const Frame& f = scene.frames[i];
            EXPECT_FALSE(lay.world.blocked(f.camera.center(), 0.2));
            EXPECT_EQ(f.camera, lay.cameras[i]);
            // Lifting each pixel must land on the surface the renderer hit.
            for (int v = 0; v < 32; v += 5)
                for (int u = 0; u < 32; u += 5) {
                    const float d = f.depth->at(u, v);
                    if (!valid_depth(d)) continue;
                    ++valid;
                    const Vec3 x = reference_lift(f.camera, u, v, d);
                    const auto back = reference_project(f.camera, x);
                    EXPECT_NEAR(back.u, u, 1e-6);
                    EXPECT_NEAR(back.v, v, 1e-6);
                }
        }
        EXPECT_GT(valid, 100u);
    }
}

double bilinear(const Image8& img, int c, double x, double y) {
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    auto p = [&](int xx, int yy) { return img.at(xx, yy, c) / 255.0; };
    return (1 - fy) * ((1 - fx) * p(x0, y0) + fx * p(x0 + 1, y0)) + fy * ((1 - fx) * p(x0, y0 + 1) + fx * p(x0 + 1, y0 + 1));
}

TEST(SyntheticTest, CrossViewPhotometricConsistency) {
    // Shading depends only on the world point and its normal, so a pixel of B re-sampled from A
    // at its analytic reprojection must agree with B on surfaces both views see.
    const SyntheticSpec spec{3, 40, 128, 128, Layout::Orbit};
    const SyntheticLayout lay = synthetic_layout(spec);
    for (auto [ia, ib] : {std::pair{0, 1}, std::pair{5, 7}, std::pair{20, 22}}) {
        const Camera& A = lay.cameras[ia];
        const Camera& B = lay.cameras[ib];
        const RenderResult ra = lay.world.render(A), rb = lay.world.render(B);
        const Image8 ia8 = to_bytes(ra.image), ib8 = to_bytes(rb.image);
        double err = 0;
        std::size_t n = 0;
        for (int v = 0; v < B.height(); ++v)
            for (int u = 0; u < B.width(); ++u) {
                const float d = rb.depth.at(u, v);
                if (!valid_depth(d)) continue;
                const auto p = project_depth(u, v, d, B, A);
                const int x0 = static_cast<int>(std::floor(p.u)), y0 = static_cast<int>(std::floor(p.v));
                if (!p.valid || x0 < 0 || y0 < 0 || x0 + 1 >= A.width() || y0 + 1 >= A.height()) continue;
                // Co-visible: all four A neighbours show the same surface at the projected depth.
                const int id = rb.ids.at(u, v);
                bool covisible = true;
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) {
                        const float da = ra.depth.at(x0 + dx, y0 + dy);
                        covisible &= ra.ids.at(x0 + dx, y0 + dy) == id && valid_depth(da) &&
                                     std::abs(da - p.depth) < 0.05 * p.depth;
                    }
                if (!covisible) continue;
                for (int c = 0; c < 3; ++c) err += std::abs(bilinear(ia8, c, p.u, p.v) - ib8.at(u, v, c) / 255.0);
                n += 3;
            }
        ASSERT_GT(n, 3000u);
        EXPECT_LE(err / n, 2.0 / 255.0) << ia << "->" << ib;
    }
}

// ---------------------------------------------------------------------------------------------
// Curation

TEST(CurationTest, CoincidentCamerasRejected) {
    const SceneRecord s = two_camera_scene(Mat4::Identity(), Mat4::Identity());
    CurationConfig cfg;
    EXPECT_FALSE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, max_camera_distance(s)));
    EXPECT_TRUE(curate_pairs(s, cfg, TaskId::Rgb, 1).empty());
}

TEST(CurationTest, BackToBackValidForImageRejectedForDepth) {
    // Camera B sits 1 unit behind A and faces the other way; no depth, so overlap is not checked.
    SceneRecord s = two_camera_scene(Mat4::Identity(), look_at(Vec3(0, 0, -1), Vec3(0, 0, -5)));
    for (auto& f : s.frames) f.depth.reset();
    EXPECT_NEAR(std::acos(s.frames[0].camera.forward().dot(s.frames[1].camera.forward())), std::numbers::pi, 1e-7);
    CurationConfig cfg;
    cfg.c_min_frac = 0.0;
    cfg.c_max_frac = 1.5;
    const double cM = max_camera_distance(s);
    EXPECT_TRUE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, cM));
    EXPECT_FALSE(pair_valid(s, 0, 1, cfg, TaskId::Depth, cM));
}

TEST(CurationTest, OverlapThresholdBoundaries) {
    // Shifting B sideways by k pixel widths (at the plane depth) keeps columns u with u + 0.5 >= k.
    const int w = 32;
    const double depth = 2.0, px = depth / w;  // focal = w
    CurationConfig cfg;
    cfg.c_min_frac = 0.0;
    cfg.c_max_frac = 2.0;
    cfg.min_valid = 64;
    auto shifted = [&](double k) { return make_extrinsics(Mat3::Identity(), Vec3(-k * px, 0, 0)); };
    // 10 of 32 columns is 31.3% and passes p_min = 30%; 9 of 32 is 28.1% and fails.
    {
        const SceneRecord s = two_camera_scene(Mat4::Identity(), shifted(22.0));
        const Overlap o = overlap_fraction(s.frames[0].camera, *s.frames[0].depth, s.frames[1].camera);
        EXPECT_EQ(o.count, 10u * 32u);
        EXPECT_TRUE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, 1.0));
    }
    {
        const SceneRecord s = two_camera_scene(Mat4::Identity(), shifted(23.0));
        const Overlap o = overlap_fraction(s.frames[0].camera, *s.frames[0].depth, s.frames[1].camera);
        EXPECT_EQ(o.count, 9u * 32u);
        EXPECT_FALSE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, 1.0));
    }
    // Valid-count boundary at 64 with p_min relaxed: a 16x16 view keeps 4 columns (64) vs 3 (48).
    cfg.p_min = 0.0;
    for (auto [k, ok] : {std::pair{11.6, true}, std::pair{12.6, false}}) {
        const SceneRecord s = two_camera_scene(Mat4::Identity(),
                                               make_extrinsics(Mat3::Identity(), Vec3(-k * depth / 16, 0, 0)), 16, 16);
        const Overlap o = overlap_fraction(s.frames[0].camera, *s.frames[0].depth, s.frames[1].camera);
        EXPECT_EQ(o.count, ok ? 64u : 48u);
        EXPECT_EQ(pair_valid(s, 0, 1, cfg, TaskId::Rgb, 1.0), ok) << k;
    }
}

TEST(CurationTest, MatchesBruteForceOracle) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        for (Layout layout : {Layout::Orbit, Layout::Room}) {
            const SceneRecord s = generate_synthetic_scene({seed, 10, 32, 32, layout});
            for (TaskId task : {TaskId::Rgb, TaskId::Depth}) {
                CurationConfig cfg;
                cfg.c_max_frac = 0.9;  // widen so 10-frame scenes have partners on both sides
                const auto fast = valid_partners(s, cfg, task);
                const auto slow = brute_force_partners(s, cfg, task);
                EXPECT_EQ(fast, slow) << seed << " " << layout_name(layout);
            }
        }
    }
}

TEST(CurationTest, CuratedSetsRespectEveryCriterion) {
    const SceneRecord s = generate_synthetic_scene({11, 60, 32, 32, Layout::Orbit});
    CurationConfig cfg;
    cfg.c_max_frac = 0.5;
    const auto samples = curate_pairs(s, cfg, TaskId::Depth, 5);
    ASSERT_FALSE(samples.empty());
    const double cM = max_camera_distance(s);
    std::map<int, std::set<std::vector<int>>> per_target;
    for (const auto& smp : samples) {
        EXPECT_GE(smp.conditioning.size(), 2u);
        EXPECT_LE(smp.conditioning.size(), 5u);
        EXPECT_TRUE(std::is_sorted(smp.conditioning.begin(), smp.conditioning.end()));
        EXPECT_EQ(std::set<int>(smp.conditioning.begin(), smp.conditioning.end()).size(), smp.conditioning.size());
        EXPECT_TRUE(per_target[smp.target].insert(smp.conditioning).second) << "duplicate set";
        for (int c : smp.conditioning) EXPECT_TRUE(pair_valid(s, c, smp.target, cfg, TaskId::Depth, cM));
    }
    for (const auto& [t, sets] : per_target) EXPECT_LE(sets.size(), 4u);
    EXPECT_EQ(curate_pairs(s, cfg, TaskId::Depth, 5).size(), samples.size());
}

TEST(CurationTest, DynamicScenesUseTimestepWindow) {
    SceneRecord s = two_camera_scene(Mat4::Identity(), make_extrinsics(Mat3::Identity(), Vec3(-0.1, 0, 0)));
    s.dynamic = true;
    CurationConfig cfg;
    cfg.c_min_frac = 0.0;
    cfg.c_max_frac = 2.0;
    s.frames[0].timestep = 0;
    s.frames[1].timestep = 7.5;
    EXPECT_TRUE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, 1.0));
    s.frames[1].timestep = 8.0;
    EXPECT_FALSE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, 1.0));
    s.dynamic = false;
    EXPECT_TRUE(pair_valid(s, 0, 1, cfg, TaskId::Rgb, 1.0));
}

TEST(CurationTest, InvalidConfigRejected) {
    CurationConfig cfg;
    cfg.p_min = 1.5;
    EXPECT_THROW(cfg.validate(), DataError);
    cfg = {};
    cfg.c_min_frac = 0.3;
    EXPECT_THROW(cfg.validate(), DataError);
}

// ---------------------------------------------------------------------------------------------
// Shards

TEST(ShardTest, RoundTripIsExact) {
    std::mt19937_64 rng(41);
    std::vector<SceneRecord> scenes{random_scene(rng, "a", 4), random_scene(rng, "b/with \"quotes\"", 3)};
    const fs::path dir = fresh_dir("roundtrip");
    const auto locs = write_shards(scenes, dir, {600});  // small cap forces several shards
    EXPECT_EQ(locs.size(), 7u);
    std::set<std::string> files;
    for (const auto& l : locs) files.insert(l.shard);
    EXPECT_GT(files.size(), 1u);
    const auto manifest = read_manifest(dir / "manifest.jsonl");
    ASSERT_EQ(manifest.size(), locs.size());
    const ShardReadReport r = read_shards(dir / "manifest.jsonl");
    EXPECT_TRUE(r.errors.empty());
    ASSERT_EQ(r.scenes.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(r.scenes[k].id, scenes[k].id);
        EXPECT_EQ(r.scenes[k].metric, scenes[k].metric);
        EXPECT_EQ(r.scenes[k].dynamic, scenes[k].dynamic);
        ASSERT_EQ(r.scenes[k].frames.size(), scenes[k].frames.size());
        for (std::size_t i = 0; i < scenes[k].frames.size(); ++i) {
            const Frame &a = scenes[k].frames[i], &b = r.scenes[k].frames[i];
            EXPECT_TRUE(frames_equal(a, b));
            EXPECT_EQ(std::memcmp(a.camera.T().data(), b.camera.T().data(), 16 * sizeof(double)), 0);
            EXPECT_EQ(std::memcmp(a.camera.K().data(), b.camera.K().data(), 9 * sizeof(double)), 0);
        }
    }
}

TEST(ShardTest, EmptyInputGivesEmptyManifest) {
    const fs::path dir = fresh_dir("empty");
    EXPECT_TRUE(write_shards({}, dir).empty());
    EXPECT_TRUE(fs::exists(dir / "manifest.jsonl"));
    EXPECT_EQ(fs::file_size(dir / "manifest.jsonl"), 0u);
    std::size_t shards = 0;
    for (const auto& e : fs::directory_iterator(dir)) shards += e.path().extension() == ".rds";
    EXPECT_EQ(shards, 0u);
    const auto r = read_shards(dir / "manifest.jsonl");
    EXPECT_TRUE(r.scenes.empty());
    EXPECT_TRUE(r.errors.empty());
}

std::uint64_t frame_hash(const std::string& scene, int frame, const Frame& f) {
    std::uint64_t h = std::hash<std::string>{}(scene);
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) h = mix_seed(h, b[i]);
    };
    mix(&frame, sizeof frame);
    mix(f.image.data.data(), f.image.data.size());
    if (f.depth) mix(f.depth->data.data(), f.depth->data.size() * sizeof(float));
    mix(f.camera.T().data(), 16 * sizeof(double));
    mix(f.camera.K().data(), 9 * sizeof(double));
    return h;
}

TEST(ShardTest, ThousandSamplesShuffledReadGivesSameMultiset) {
    std::vector<SceneRecord> scenes;
    std::multiset<std::uint64_t> written;
    for (int k = 0; k < 10; ++k) {
        scenes.push_back(generate_synthetic_scene({static_cast<std::uint64_t>(100 + k), 100, 8, 8, Layout::Orbit}));
        for (int i = 0; i < 100; ++i) written.insert(frame_hash(scenes.back().id, i, scenes.back().frames[i]));
    }
    const fs::path dir = fresh_dir("thousand");
    write_shards(scenes, dir, {1 << 16});
    auto locs = read_manifest(dir / "manifest.jsonl");
    ASSERT_EQ(locs.size(), 1000u);

    std::multiset<std::uint64_t> in_order, shuffled;
    for (const auto& l : locs) {
        const FrameRecord r = read_record(dir, l);
        in_order.insert(frame_hash(r.scene, r.frame, r.data));
    }
    std::shuffle(locs.begin(), locs.end(), std::mt19937_64(9));
    for (const auto& l : locs) {
        const FrameRecord r = read_record(dir, l);
        shuffled.insert(frame_hash(r.scene, r.frame, r.data));
    }
    EXPECT_EQ(in_order, written);
    EXPECT_EQ(shuffled, written);
}

TEST(ShardTest, CorruptAndTruncatedRecordsAreReported) {
    std::mt19937_64 rng(43);
    const std::vector<SceneRecord> scenes{random_scene(rng, "x", 3), random_scene(rng, "y", 2)};
    const fs::path dir = fresh_dir("corrupt");
    const auto locs = write_shards(scenes, dir);
    ASSERT_EQ(locs.size(), 5u);

    // Flip one payload byte of record 1.
    {
        std::fstream f(dir / locs[1].shard, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(static_cast<std::streamoff>(locs[1].offset + locs[1].length - 5));
        char c;
        f.get(c);
        f.seekp(static_cast<std::streamoff>(locs[1].offset + locs[1].length - 5));
        f.put(static_cast<char>(c ^ 0x40));
    }
    try {
        read_record(dir, locs[1]);
        FAIL() << "corrupt record accepted";
    } catch (const ShardError& e) {
        EXPECT_EQ(e.shard, locs[1].shard);
        EXPECT_EQ(e.offset, locs[1].offset);
        EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
    }

    // Truncate the final record.
    fs::resize_file(dir / locs[4].shard, locs[4].offset + locs[4].length / 2);
    ShardReadReport r;
    ASSERT_NO_THROW(r = read_shards(dir / "manifest.jsonl"));
    ASSERT_GE(r.errors.size(), 2u);
    EXPECT_NE(r.errors.back().find(std::to_string(locs[4].offset)), std::string::npos);
    EXPECT_NE(r.errors.back().find("truncated"), std::string::npos);
    ASSERT_EQ(r.scenes.size(), 2u);
    EXPECT_TRUE(frames_equal(r.scenes[0].frames[0], scenes[0].frames[0]));
    EXPECT_TRUE(frames_equal(r.scenes[1].frames[0], scenes[1].frames[0]));
}

TEST(ShardTest, PairManifestRoundTrip) {
    const fs::path dir = fresh_dir("pairs");
    const std::vector<CuratedSample> samples{{"s0", 3, {1, 4, 5}, TaskId::Rgb}, {"s1", 0, {2, 9}, TaskId::Depth}};
    write_pair_manifest(dir / "pairs.jsonl", samples);
    const auto back = read_pair_manifest(dir / "pairs.jsonl");
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back[i].scene, samples[i].scene);
        EXPECT_EQ(back[i].target, samples[i].target);
        EXPECT_EQ(back[i].conditioning, samples[i].conditioning);
        EXPECT_EQ(back[i].task, samples[i].task);
    }
}

}  // namespace
}  // namespace raydiff
