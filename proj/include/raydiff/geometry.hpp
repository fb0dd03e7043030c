#pragma once

#include <Eigen/Dense>

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "raydiff/grid.hpp"

// Pinhole camera algebra. Everything here runs in double precision.
//
// Conventions:
//  * Extrinsics are world-to-camera: x_cam = R * x_world + t.
//  * Pixel (u, v) is an integer-indexed pixel whose center sits at the continuous
//    image coordinate (u + 0.5, v + 0.5). Rays are cast through centers and
//    projections subtract the same 0.5 on the way back.
//  * Depth is z-depth, the distance along the camera's optical axis.

namespace raydiff {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class InvalidCamera : public GeometryError {
public:
    using GeometryError::GeometryError;
};
class InvalidDepth : public GeometryError {
public:
    using GeometryError::GeometryError;
};
class UndefinedOverlap : public GeometryError {
public:
    using GeometryError::GeometryError;
};

inline constexpr double kPixelCenter = 0.5;

class Camera {
public:
    /// Unit-focal 1x1 camera at the origin.
    Camera() : Camera(Mat3::Identity(), Mat4::Identity(), 1, 1) {}
    /// Validates every invariant; throws InvalidCamera on violation.
    Camera(const Mat3& K, const Mat4& T, int width, int height);

    static Camera from_fov(double fx, double fy, double cx, double cy, const Mat4& T, int width,
                           int height);

    const Mat3& K() const { return K_; }
    const Mat4& T() const { return T_; }
    int width() const { return width_; }
    int height() const { return height_; }

    Mat3 R() const { return T_.topLeftCorner<3, 3>(); }
    Vec3 t() const { return T_.topRightCorner<3, 1>(); }
    /// Camera center in world coordinates, -R^T t.
    Vec3 center() const { return -R().transpose() * t(); }
    /// Unit forward axis (+z of the camera) expressed in world coordinates.
    Vec3 forward() const { return R().transpose() * Vec3::UnitZ(); }

    Camera with_extrinsics(const Mat4& T) const { return Camera(K_, T, width_, height_); }
    /// Same camera observing an image resampled by `factor` (intrinsics rows 0/1 scale).
    Camera resized(double factor) const;

    bool operator==(const Camera& o) const {
        return K_ == o.K_ && T_ == o.T_ && width_ == o.width_ && height_ == o.height_;
    }

private:
    Mat3 K_;
    Mat4 T_;
    int width_;
    int height_;
};

/// Rigid transform inverse using R^T, exact up to rounding.
Mat4 rigid_inverse(const Mat4& T);
Mat4 make_extrinsics(const Mat3& R, const Vec3& t);
/// World-to-camera extrinsics for a camera at `eye` looking at `target`, y-axis roughly `down`.
Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& down = Vec3(0, 1, 0));

/// Per-pixel rays of a pinhole camera; all pixels share one origin.
struct RayMap {
    int width = 0;
    int height = 0;
    Vec3 origin = Vec3::Zero();
    std::vector<Vec3> directions;  // row-major, unit norm, world frame

    const Vec3& origin_at(int /*u*/, int /*v*/) const { return origin; }
    const Vec3& direction_at(int u, int v) const {
        return directions[static_cast<std::size_t>(v) * width + u];
    }
};

RayMap compute_raymap(const Camera& camera);

/// T_source * T_target^{-1}: maps target-camera coordinates into source-camera coordinates.
Mat4 relative_extrinsics(const Camera& source, const Camera& target);

struct ProjectedPixel {
    double u = 0;
    double v = 0;
    double depth = 0;
    bool valid = false;  // inside [0,W]x[0,H] (continuous coordinates) with positive depth
};

/// 4x4 map from the lifted source pixel [x*d, y*d, d, 1] (continuous coordinates) to the
/// same form in the target camera: K~_t T_t (K~_s T_s)^{-1}.
Mat4 projection_matrix(const Camera& source, const Camera& target);

/// Reprojects pixel (u, v) of `source` with z-depth `depth` into `target`. Throws InvalidDepth
/// when depth <= 0 or non-finite.
ProjectedPixel project_depth(double u, double v, double depth, const Camera& source,
                             const Camera& target);

struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Eigen::Vector3f> colors;  // RGB in [0,1]

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    void append(const PointCloud& other);
    /// Applies x -> M x (M rigid, 4x4) to every point.
    PointCloud transformed(const Mat4& M) const;
};

/// Lifts every valid pixel to a colored 3D point in the camera's world frame.
/// `image` may be empty (0x0), in which case points are colored mid-gray.
PointCloud unproject(const ImageF& image, const DepthMap& depth, const Camera& camera,
                     const Mask& valid_mask);

struct Overlap {
    double fraction = 0;
    std::size_t count = 0;        // source pixels landing inside target with positive depth
    std::size_t valid_source = 0;
};

/// Fraction of valid source pixels that project inside the target image.
Overlap overlap_fraction(const Camera& source, const DepthMap& source_depth,
                         const Camera& target);

/// Binary little-endian PLY with float xyz and uchar rgb per vertex.
void write_ply(const std::string& path, const PointCloud& cloud);
PointCloud read_ply(const std::string& path);

}  // namespace raydiff
