#include "raydiff/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "raydiff/diffusion.hpp"

namespace raydiff {

Layout parse_layout(const std::string& name) {
    if (name == "orbit") return Layout::Orbit;
    if (name == "room") return Layout::Room;
    throw DataError("unknown layout '" + name + "' (expected orbit or room)");
}

const char* layout_name(Layout layout) { return layout == Layout::Orbit ? "orbit" : "room"; }

namespace {

constexpr double kHitEps = 1e-9;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct Hit {
    double t = kInf;
    Vec3 normal = Vec3::Zero();
};

Hit intersect(const Primitive& p, const Vec3& o, const Vec3& d) {
    Hit h;
    switch (p.kind) {
        case Primitive::Kind::Sphere: {
            const Vec3 oc = o - p.center;
            const double b = oc.dot(d);
            const double c = oc.squaredNorm() - p.radius * p.radius;
            const double disc = b * b - c;
            if (disc < 0) return h;
            const double s = std::sqrt(disc);
            double t = -b - s;
            if (t <= kHitEps) t = -b + s;
            if (t <= kHitEps) return h;
            h.t = t;
            h.normal = (o + t * d - p.center) / p.radius;
            return h;
        }
        case Primitive::Kind::Box:
        case Primitive::Kind::RoomBox: {
            double t_in = -kInf, t_out = kInf;
            int ax_in = -1, ax_out = -1;
            for (int a = 0; a < 3; ++a) {
                const double lo = p.center[a] - p.half[a], hi = p.center[a] + p.half[a];
                if (d[a] == 0.0) {
                    if (o[a] < lo || o[a] > hi) return h;
                    continue;
                }
                double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
                if (t0 > t1) std::swap(t0, t1);
                if (t0 > t_in) t_in = t0, ax_in = a;
                if (t1 < t_out) t_out = t1, ax_out = a;
            }
            if (t_in > t_out) return h;
            if (p.kind == Primitive::Kind::Box) {
                if (t_in <= kHitEps || ax_in < 0) return h;
                h.t = t_in;
                h.normal = Vec3::Zero();
                h.normal[ax_in] = d[ax_in] > 0 ? -1.0 : 1.0;
            } else {
                if (t_out <= kHitEps || ax_out < 0) return h;
                h.t = t_out;
                h.normal = Vec3::Zero();
                h.normal[ax_out] = d[ax_out] > 0 ? -1.0 : 1.0;
            }
            return h;
        }
        case Primitive::Kind::Quad: {
            const int a = p.axis;
            if (d[a] == 0.0) return h;
            const double t = (p.center[a] - o[a]) / d[a];
            if (t <= kHitEps) return h;
            const Vec3 x = o + t * d;
            for (int b = 0; b < 3; ++b)
                if (b != a && std::abs(x[b] - p.center[b]) > p.half[b]) return h;
            h.t = t;
            h.normal = Vec3::Zero();
            h.normal[a] = d[a] > 0 ? -1.0 : 1.0;
            return h;
        }
    }
    return h;
}

Eigen::Vector3f shade(const Primitive& p, const Vec3& x, const Vec3& n, const Vec3& light) {
    const Texture& tex = p.texture;
    const float s = static_cast<float>(0.5 + 0.5 * std::sin(tex.wave.dot(x) + tex.phase));
    const float lambert = static_cast<float>(0.45 + 0.55 * std::max(0.0, n.dot(light)));
    Eigen::Vector3f c = (tex.base * (1.0f - s) + tex.accent * s) * lambert;
    return c.cwiseMax(0.0f).cwiseMin(1.0f);
}

Eigen::Vector3f sky(const Vec3& d) {
    // World up is -y.
    const float up = static_cast<float>(std::clamp(-d.y(), 0.0, 1.0));
    const Eigen::Vector3f horizon(0.78f, 0.84f, 0.9f), zenith(0.35f, 0.52f, 0.82f);
    return horizon * (1.0f - up) + zenith * up;
}

Texture random_texture(std::mt19937_64& rng, double max_freq) {
    std::uniform_real_distribution<float> c(0.1f, 0.9f);
    std::uniform_real_distribution<double> u(-1.0, 1.0), ph(0.0, 2 * std::numbers::pi);
    std::uniform_real_distribution<double> f(0.4, max_freq);
    Texture t;
    t.base = Eigen::Vector3f(c(rng), c(rng), c(rng));
    t.accent = Eigen::Vector3f(c(rng), c(rng), c(rng));
    Vec3 dir(u(rng), u(rng), u(rng));
    if (dir.norm() < 1e-3) dir = Vec3::UnitX();
    t.wave = dir.normalized() * f(rng);
    t.phase = ph(rng);
    return t;
}

void add_objects(SyntheticWorld& w, std::mt19937_64& rng, double floor_y, double spread, int count) {
    std::uniform_real_distribution<double> pos(-spread, spread), r(0.3, 0.65), hb(0.25, 0.6);
    std::bernoulli_distribution sphere(0.5);
    for (int i = 0; i < count; ++i) {
        Primitive p;
        if (sphere(rng)) {
            p.kind = Primitive::Kind::Sphere;
            p.radius = r(rng);
            p.center = Vec3(pos(rng), floor_y - p.radius, pos(rng));
        } else {
            p.kind = Primitive::Kind::Box;
            p.half = Vec3(hb(rng), hb(rng), hb(rng));
            p.center = Vec3(pos(rng), floor_y - p.half.y(), pos(rng));
        }
        p.texture = random_texture(rng, 2.5);
        w.primitives.push_back(p);
    }
}

Camera make_camera(const SyntheticSpec& spec, const Vec3& eye, const Vec3& target) {
    const double f = 0.5 * spec.width / std::tan(0.5 * spec.fov_degrees * std::numbers::pi / 180.0);
    return Camera::from_fov(f, f, 0.5 * spec.width, 0.5 * spec.height, look_at(eye, target), spec.width,
                            spec.height);
}

}  // namespace

SyntheticWorld SyntheticWorld::random(std::uint64_t seed, Layout layout) {
    std::mt19937_64 rng(seed);
    SyntheticWorld w;
    std::uniform_int_distribution<int> count(3, 5);
    if (layout == Layout::Orbit) {
        // Enclosure with its floor at y = 1 and walls well outside the orbit, so every ray hits.
        Primitive hall;
        hall.kind = Primitive::Kind::RoomBox;
        hall.center = Vec3(0, -2, 0);
        hall.half = Vec3(6.5, 3, 6.5);
        hall.texture = random_texture(rng, 1.5);
        w.primitives.push_back(hall);
        add_objects(w, rng, 1.0, 1.4, count(rng));
    } else {
        Primitive room;
        room.kind = Primitive::Kind::RoomBox;
        room.center = Vec3(0, 0, 0);
        room.half = Vec3(4, 1.5, 4);
        room.texture = random_texture(rng, 1.2);
        w.primitives.push_back(room);
        add_objects(w, rng, 1.5, 2.5, count(rng));
    }
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    w.light = Vec3(u(rng), -1.0, u(rng)).normalized();
    return w;
}

bool SyntheticWorld::blocked(const Vec3& x, double margin) const {
    for (const auto& p : primitives) {
        switch (p.kind) {
            case Primitive::Kind::Sphere:
                if ((x - p.center).norm() < p.radius + margin) return true;
                break;
            case Primitive::Kind::Box:
                if (((x - p.center).cwiseAbs() - p.half).maxCoeff() < margin) return true;
                break;
            case Primitive::Kind::RoomBox:
                if (((x - p.center).cwiseAbs() - p.half).maxCoeff() > -margin) return true;
                break;
            case Primitive::Kind::Quad:
                break;
        }
    }
    return false;
}

RenderResult SyntheticWorld::render(const Camera& camera) const {
    const RayMap rays = compute_raymap(camera);
    const Mat3 R = camera.R();
    RenderResult out{ImageF(camera.width(), camera.height(), 3), DepthMap(camera.width(), camera.height()),
                     Grid<std::int32_t>(camera.width(), camera.height(), 1, -1)};
    for (int v = 0; v < camera.height(); ++v) {
        for (int u = 0; u < camera.width(); ++u) {
            const Vec3& d = rays.direction_at(u, v);
            Hit best;
            int best_id = -1;
            for (std::size_t i = 0; i < primitives.size(); ++i) {
                const Hit h = intersect(primitives[i], rays.origin, d);
                if (h.t < best.t) best = h, best_id = static_cast<int>(i);
            }
            Eigen::Vector3f c;
            if (best_id < 0) {
                c = sky(d);
                out.depth.at(u, v) = std::numeric_limits<float>::quiet_NaN();
            } else {
                const Vec3 x = rays.origin + best.t * d;
                c = shade(primitives[best_id], x, best.normal, light);
                out.depth.at(u, v) = static_cast<float>(best.t * (R * d).z());
            }
            out.ids.at(u, v) = best_id;
            for (int k = 0; k < 3; ++k) out.image.at(u, v, k) = c[k];
        }
    }
    return out;
}

SyntheticLayout synthetic_layout(const SyntheticSpec& spec) {
    if (spec.width <= 0 || spec.height <= 0 || spec.width % 4 || spec.height % 4)
        throw DataError("synthetic scene resolution must be positive and divisible by 4");
    if (spec.num_frames < 0) throw DataError("synthetic scene frame count must be non-negative");
    for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
        SyntheticLayout out;
        out.sub_seed = mix_seed(spec.seed, attempt);
        std::mt19937_64 rng(out.sub_seed);
        out.world = SyntheticWorld::random(rng(), spec.layout);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const double theta0 = 2 * std::numbers::pi * u(rng);
        bool ok = true;
        const int n = spec.num_frames;
        if (spec.layout == Layout::Orbit) {
            const double radius = 3.2 + 0.8 * u(rng);
            const double height = -0.2 - 0.6 * u(rng);
            for (int i = 0; i < n && ok; ++i) {
                const double th = theta0 + 2 * std::numbers::pi * i / std::max(n, 1);
                const double r = radius * (1.0 + 0.08 * std::cos(3 * th));
                const Vec3 eye(r * std::cos(th), height + 0.25 * std::sin(2 * th), r * std::sin(th));
                const Vec3 target(0.2 * std::cos(5 * th), 0.45, 0.2 * std::sin(5 * th));
                ok = !out.world.blocked(eye, 0.3);
                if (ok) out.cameras.push_back(make_camera(spec, eye, target));
            }
        } else {
            const double ax = 2.4 + 0.6 * u(rng), az = 2.0 + 0.6 * u(rng);
            for (int i = 0; i < n && ok; ++i) {
                const double th = theta0 + 2 * std::numbers::pi * i / std::max(n, 1);
                const Vec3 eye(ax * std::cos(th), -0.1 + 0.2 * std::sin(3 * th), az * std::sin(th));
                // Look across the room, slightly ahead of the opposite side.
                const double look = th + std::numbers::pi + 0.6;
                const Vec3 target(1.5 * std::cos(look), 0.6, 1.5 * std::sin(look));
                ok = !out.world.blocked(eye, 0.4);
                if (ok) out.cameras.push_back(make_camera(spec, eye, target));
            }
        }
        if (ok) return out;
    }
    throw DataError("synthetic scene: no collision-free layout found");
}

SceneRecord generate_synthetic_scene(const SyntheticSpec& spec) {
    const SyntheticLayout layout = synthetic_layout(spec);
    SceneRecord scene;
    scene.id = spec.id.empty() ? std::string(layout_name(spec.layout)) + "-" + std::to_string(spec.seed) : spec.id;
    scene.metric = true;
    scene.dynamic = false;
    for (std::size_t i = 0; i < layout.cameras.size(); ++i) {
        const RenderResult r = layout.world.render(layout.cameras[i]);
        Frame f;
        f.image = to_bytes(r.image);
        f.depth = r.depth;
        f.camera = layout.cameras[i];
        f.timestep = static_cast<double>(i);
        scene.frames.push_back(std::move(f));
    }
    return scene;
}

}  // namespace raydiff
