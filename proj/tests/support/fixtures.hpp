#pragma once

#include <cmath>
#include <random>

#include "raydiff/geometry.hpp"

// Random cameras and independent reference implementations shared by the unit and acceptance
// tests. The references avoid the code paths they check (no projection_matrix, no K inverse
// via homogeneous helpers).

namespace raydiff::testing {

inline Mat3 random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q.toRotationMatrix();
}

inline Camera random_camera(std::mt19937_64& rng, int width = 32, int height = 24) {
    std::uniform_real_distribution<double> f(0.6 * width, 1.6 * width);
    std::uniform_real_distribution<double> c(-2.0, 2.0);
    std::uniform_real_distribution<double> t(-3.0, 3.0);
    Mat3 K;
    K << f(rng), 0.0, width / 2.0 + c(rng), 0.0, f(rng), height / 2.0 + c(rng), 0.0, 0.0, 1.0;
    return Camera(K, make_extrinsics(random_rotation(rng), Vec3(t(rng), t(rng), t(rng))), width, height);
}

/// K^-1 through the adjugate: inv = adj(K) / det(K).
inline Mat3 adjugate_inverse(const Mat3& K) {
    Mat3 adj;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            Eigen::Matrix2d minor;
            int mi = 0;
            for (int i = 0; i < 3; ++i) {
                if (i == c) continue;
                int mj = 0;
                for (int j = 0; j < 3; ++j) {
                    if (j == r) continue;
                    minor(mi, mj++) = K(i, j);
                }
                ++mi;
            }
            adj(r, c) = ((r + c) % 2 ? -1.0 : 1.0) * minor.determinant();
        }
    return adj / K.determinant();
}

/// World point of pixel (u, v) at z-depth d, built from K^-1 and the camera pose directly.
inline Vec3 reference_lift(const Camera& cam, double u, double v, double d) {
    const Vec3 x_cam = adjugate_inverse(cam.K()) * Vec3(u + 0.5, v + 0.5, 1.0) * d;
    return cam.R().transpose() * (x_cam - cam.t());
}

struct ReferencePixel {
    double u, v, depth;
    bool valid;
};

/// Standard K [R | t] projection of a world point.
inline ReferencePixel reference_project(const Camera& cam, const Vec3& world) {
    const Vec3 x_cam = cam.R() * world + cam.t();
    const Vec3 h = cam.K() * x_cam;
    const double x = h.x() / h.z(), y = h.y() / h.z();
    return {x - 0.5, y - 0.5, x_cam.z(),
            x_cam.z() > 0.0 && x >= 0.0 && x <= cam.width() && y >= 0.0 && y <= cam.height()};
}

/// Brute-force overlap count through the public project_depth.
inline Overlap brute_force_overlap(const Camera& source, const DepthMap& depth, const Camera& target) {
    Overlap o;
    for (int v = 0; v < depth.height; ++v)
        for (int u = 0; u < depth.width; ++u) {
            const float d = depth.at(u, v);
            if (!valid_depth(d)) continue;
            ++o.valid_source;
            if (project_depth(u, v, d, source, target).valid) ++o.count;
        }
    o.fraction = o.valid_source ? double(o.count) / double(o.valid_source) : 0.0;
    return o;
}

inline DepthMap random_depth(std::mt19937_64& rng, int width, int height, double lo, double hi,
                             double invalid_fraction = 0.1) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DepthMap d(width, height);
    for (float& x : d.data)
        x = u(rng) < invalid_fraction ? std::nanf("") : static_cast<float>(lo + (hi - lo) * u(rng));
    return d;
}

}  // namespace raydiff::testing
