#pragma once

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "raydiff/codec.hpp"
#include "raydiff/geometry.hpp"
#include "raydiff/grid.hpp"

// Scene records, the procedural scene generator, pair curation and the shard format.

namespace raydiff {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Frame {
    Image8 image;                  // RGB
    std::optional<DepthMap> depth; // NaN marks invalid pixels
    Camera camera;
    double timestep = 0;           // may be fractional for multi-camera rigs
};

struct SceneRecord {
    std::string id;
    bool metric = true;
    bool dynamic = false;
    std::vector<Frame> frames;
};

// ---------------------------------------------------------------------------------------------
// Synthetic scenes

enum class Layout { Orbit, Room };
Layout parse_layout(const std::string& name);
const char* layout_name(Layout layout);

/// Surface colour is a smooth function of the world hit point blended between two base
/// colours, times a flat Lambertian term that depends only on the surface normal.
struct Texture {
    Eigen::Vector3f base{0.5f, 0.5f, 0.5f};
    Eigen::Vector3f accent{0.8f, 0.8f, 0.8f};
    Vec3 wave = Vec3(1.0, 0.0, 0.0);  // spatial frequency, radians per scene unit
    double phase = 0;
};

struct Primitive {
    enum class Kind { Sphere, Box, Quad, RoomBox };
    Kind kind = Kind::Sphere;
    Vec3 center = Vec3::Zero();
    Vec3 half = Vec3::Ones();  // box / room half extents; quad: half extents in-plane
    double radius = 1;         // sphere
    int axis = 2;              // quad normal axis
    Texture texture;
};

struct RenderResult {
    ImageF image;            // [0,1]
    DepthMap depth;          // z-depth, NaN where the ray escapes
    Grid<std::int32_t> ids;  // primitive index per pixel, -1 for background
};

class SyntheticWorld {
public:
    std::vector<Primitive> primitives;
    Vec3 light = Vec3(0.3, -1.0, 0.4).normalized();  // direction towards the light

    static SyntheticWorld random(std::uint64_t seed, Layout layout);
    RenderResult render(const Camera& camera) const;
    /// Whether `p` lies inside (or within `margin` of) solid geometry.
    bool blocked(const Vec3& p, double margin) const;
};

struct SyntheticSpec {
    std::uint64_t seed = 0;
    int num_frames = 100;
    int width = 32;
    int height = 32;
    Layout layout = Layout::Orbit;
    double fov_degrees = 60.0;
    std::string id;  // defaults to "<layout>-<seed>"
};

/// Deterministic in `spec`. Camera placements that collide with geometry are regenerated from
/// the next sub-seed.
SceneRecord generate_synthetic_scene(const SyntheticSpec& spec);
/// Camera trajectory and world used by generate_synthetic_scene, exposed for oracles.
struct SyntheticLayout {
    SyntheticWorld world;
    std::vector<Camera> cameras;
    std::uint64_t sub_seed = 0;
};
SyntheticLayout synthetic_layout(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------------------------
// Curation

struct CurationConfig {
    double c_min_frac = 0.05;
    double c_max_frac = 0.2;
    double t_min = -8;
    double t_max = 8;
    double alpha_min = 0;
    double alpha_max_depth = std::numbers::pi / 2;
    double alpha_max_image = std::numbers::pi;
    double p_min = 0.30;
    std::size_t min_valid = 64;
    int min_views = 2;
    int max_views = 5;
    int sets_per_target = 4;

    void validate() const;
};

/// Largest camera-centre distance over all frame pairs.
double max_camera_distance(const SceneRecord& scene);

/// Whether conditioning frame c is a valid partner of target frame t.
bool pair_valid(const SceneRecord& scene, int c, int t, const CurationConfig& cfg, TaskId task, double c_M);

struct CuratedSample {
    std::string scene;
    int target = 0;
    std::vector<int> conditioning;
    TaskId task = TaskId::Rgb;
};

/// valid[t] = sorted list of valid conditioning partners of target t.
std::vector<std::vector<int>> valid_partners(const SceneRecord& scene, const CurationConfig& cfg, TaskId task);

/// For every target with at least min_views valid partners, up to sets_per_target distinct
/// conditioning sets of size min_views..max_views drawn without replacement (seeded).
std::vector<CuratedSample> curate_pairs(const SceneRecord& scene, const CurationConfig& cfg, TaskId task,
                                        std::uint64_t seed);

// ---------------------------------------------------------------------------------------------
// Shards

inline constexpr int kShardFormatVersion = 1;

struct ShardLocation {
    std::string shard;  // file name relative to the manifest directory
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    std::string scene;
    int frame = 0;
};

/// Record-level failure carrying the shard and byte offset.
class ShardError : public DataError {
public:
    ShardError(const std::string& shard, std::uint64_t offset, const std::string& what);
    std::string shard;
    std::uint64_t offset;
};

struct ShardWriterOptions {
    std::uint64_t max_shard_bytes = 64ull << 20;
};

/// Writes every frame of every scene as one record, rolling over to a new shard file once
/// max_shard_bytes is exceeded, and writes manifest.jsonl. Returns the manifest entries.
std::vector<ShardLocation> write_shards(const std::vector<SceneRecord>& scenes, const std::filesystem::path& dir,
                                        const ShardWriterOptions& options = {});

std::vector<ShardLocation> read_manifest(const std::filesystem::path& manifest);

struct FrameRecord {
    std::string scene;
    int frame = 0;
    int num_frames = 0;
    bool metric = true;
    bool dynamic = false;
    Frame data;
};

FrameRecord read_record(const std::filesystem::path& dir, const ShardLocation& loc);

struct ShardReadReport {
    std::vector<SceneRecord> scenes;  // manifest order
    std::vector<std::string> errors;  // one line per unreadable record
};

/// Reads every record listed in the manifest; corrupt or truncated records are reported
/// rather than thrown.
ShardReadReport read_shards(const std::filesystem::path& manifest);

/// Serialized record payload (without the frame header); exposed for tests.
std::vector<std::uint8_t> encode_record(const SceneRecord& scene, int frame);

// Pair manifests (JSON lines).
void write_pair_manifest(const std::filesystem::path& path, const std::vector<CuratedSample>& samples);
std::vector<CuratedSample> read_pair_manifest(const std::filesystem::path& path);

}  // namespace raydiff
