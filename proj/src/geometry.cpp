#include "raydiff/geometry.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace raydiff {

namespace {

constexpr double kRotationTol = 1e-9;

Mat4 homogeneous_intrinsics(const Mat3& K) {
    Mat4 out = Mat4::Identity();
    out.topLeftCorner<3, 3>() = K;
    return out;
}

Mat4 homogeneous_intrinsics_inverse(const Mat3& K) {
    // Upper-triangular K with K(2,2) = 1 inverts in closed form.
    const double fx = K(0, 0), s = K(0, 1), cx = K(0, 2), fy = K(1, 1), cy = K(1, 2);
    Mat3 inv;
    inv << 1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy),
        0.0, 1.0 / fy, -cy / fy,
        0.0, 0.0, 1.0;
    Mat4 out = Mat4::Identity();
    out.topLeftCorner<3, 3>() = inv;
    return out;
}

}  // namespace

Camera::Camera(const Mat3& K, const Mat4& T, int width, int height)
    : K_(K), T_(T), width_(width), height_(height) {
    if (width <= 0 || height <= 0) throw InvalidCamera("camera resolution must be positive");
    if (!K.allFinite() || !T.allFinite()) throw InvalidCamera("camera matrices must be finite");
    if (!(K(0, 0) > 0.0) || !(K(1, 1) > 0.0))
        throw InvalidCamera("singular intrinsics: fx and fy must be positive");
    if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0 || K(2, 2) != 1.0)
        throw InvalidCamera("intrinsics must be upper triangular with K[2][2] = 1");
    if (T(3, 0) != 0.0 || T(3, 1) != 0.0 || T(3, 2) != 0.0 || T(3, 3) != 1.0)
        throw InvalidCamera("extrinsics bottom row must be [0,0,0,1]");
    const Mat3 R = T.topLeftCorner<3, 3>();
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > kRotationTol)
        throw InvalidCamera("extrinsics rotation is not orthonormal");
    if (std::abs(R.determinant() - 1.0) > kRotationTol)
        throw InvalidCamera("extrinsics rotation must have determinant +1");
}

Camera Camera::from_fov(double fx, double fy, double cx, double cy, const Mat4& T, int width,
                        int height) {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return Camera(K, T, width, height);
}

Camera Camera::resized(double factor) const {
    Mat3 K = K_;
    K.row(0) *= factor;
    K.row(1) *= factor;
    const int w = std::max(1, static_cast<int>(std::lround(width_ * factor)));
    const int h = std::max(1, static_cast<int>(std::lround(height_ * factor)));
    return Camera(K, T_, w, h);
}

Mat4 rigid_inverse(const Mat4& T) {
    const Mat3 Rt = T.topLeftCorner<3, 3>().transpose();
    Mat4 out = Mat4::Identity();
    out.topLeftCorner<3, 3>() = Rt;
    out.topRightCorner<3, 1>() = -Rt * T.topRightCorner<3, 1>();
    return out;
}

Mat4 make_extrinsics(const Mat3& R, const Vec3& t) {
    Mat4 T = Mat4::Identity();
    T.topLeftCorner<3, 3>() = R;
    T.topRightCorner<3, 1>() = t;
    return T;
}

Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& down) {
    const Vec3 z = (target - eye).normalized();
    Vec3 x = down.cross(z);
    if (x.norm() < 1e-12) x = Vec3::UnitX().cross(z);
    x.normalize();
    const Vec3 y = z.cross(x);
    Mat3 R;  // rows are camera axes in world coordinates
    R.row(0) = x.transpose();
    R.row(1) = y.transpose();
    R.row(2) = z.transpose();
    return make_extrinsics(R, -R * eye);
}

RayMap compute_raymap(const Camera& camera) {
    RayMap map;
    map.width = camera.width();
    map.height = camera.height();
    map.origin = camera.center();
    map.directions.resize(static_cast<std::size_t>(map.width) * map.height);
    // (K R)^{-1} = R^T K^{-1}
    const Mat3 KRinv = camera.R().transpose() * homogeneous_intrinsics_inverse(camera.K()).topLeftCorner<3, 3>();
    for (int v = 0; v < map.height; ++v) {
        for (int u = 0; u < map.width; ++u) {
            const Vec3 pix(u + kPixelCenter, v + kPixelCenter, 1.0);
            map.directions[static_cast<std::size_t>(v) * map.width + u] = (KRinv * pix).normalized();
        }
    }
    return map;
}

Mat4 relative_extrinsics(const Camera& source, const Camera& target) {
    return source.T() * rigid_inverse(target.T());
}

Mat4 projection_matrix(const Camera& source, const Camera& target) {
    // (K~_s T_s)^{-1} = T_s^{-1} K~_s^{-1}
    return homogeneous_intrinsics(target.K()) * target.T() * rigid_inverse(source.T()) *
           homogeneous_intrinsics_inverse(source.K());
}

namespace {

ProjectedPixel apply_projection(const Mat4& M, double u, double v, double depth, int width,
                                int height) {
    const double x = u + kPixelCenter;
    const double y = v + kPixelCenter;
    const Vec4 p = M * Vec4(x * depth, y * depth, depth, 1.0);
    ProjectedPixel out;
    out.depth = p.z();
    const double xp = p.x() / p.z();
    const double yp = p.y() / p.z();
    out.u = xp - kPixelCenter;
    out.v = yp - kPixelCenter;
    out.valid = p.z() > 0.0 && xp >= 0.0 && xp <= width && yp >= 0.0 && yp <= height;
    return out;
}

}  // namespace

ProjectedPixel project_depth(double u, double v, double depth, const Camera& source,
                             const Camera& target) {
    if (!(depth > 0.0) || !std::isfinite(depth))
        throw InvalidDepth("project_depth: depth must be positive and finite");
    return apply_projection(projection_matrix(source, target), u, v, depth, target.width(),
                            target.height());
}

void PointCloud::append(const PointCloud& other) {
    points.insert(points.end(), other.points.begin(), other.points.end());
    colors.insert(colors.end(), other.colors.begin(), other.colors.end());
}

PointCloud PointCloud::transformed(const Mat4& M) const {
    PointCloud out;
    out.colors = colors;
    out.points.reserve(points.size());
    const Mat3 R = M.topLeftCorner<3, 3>();
    const Vec3 t = M.topRightCorner<3, 1>();
    for (const auto& p : points) out.points.push_back(R * p + t);
    return out;
}

PointCloud unproject(const ImageF& image, const DepthMap& depth, const Camera& camera,
                     const Mask& valid_mask) {
    if (!depth.same_extent(valid_mask) ||
        (!image.data.empty() && !image.same_extent(depth)))
        throw std::invalid_argument("unproject: image, depth and mask must share dimensions");
    if (depth.width != camera.width() || depth.height != camera.height())
        throw std::invalid_argument("unproject: depth resolution does not match camera");
    const RayMap rays = compute_raymap(camera);
    const Mat3 R = camera.R();
    PointCloud cloud;
    for (int v = 0; v < depth.height; ++v) {
        for (int u = 0; u < depth.width; ++u) {
            if (!valid_mask.at(u, v)) continue;
            const double d = depth.at(u, v);
            if (!(d > 0.0) || !std::isfinite(d)) continue;
            const Vec3& dir = rays.direction_at(u, v);
            // Scale the unit ray so its component along the optical axis equals d.
            const double axial = (R * dir).z();
            cloud.points.push_back(rays.origin + dir * (d / axial));
            if (image.data.empty()) {
                cloud.colors.emplace_back(0.5f, 0.5f, 0.5f);
            } else {
                cloud.colors.emplace_back(image.at(u, v, 0), image.at(u, v, 1), image.at(u, v, 2));
            }
        }
    }
    return cloud;
}

Overlap overlap_fraction(const Camera& source, const DepthMap& source_depth,
                         const Camera& target) {
    if (source_depth.width != source.width() || source_depth.height != source.height())
        throw std::invalid_argument("overlap_fraction: depth resolution does not match camera");
    const Mat4 M = projection_matrix(source, target);
    Overlap out;
    for (int v = 0; v < source_depth.height; ++v) {
        for (int u = 0; u < source_depth.width; ++u) {
            const float d = source_depth.at(u, v);
            if (!valid_depth(d)) continue;
            ++out.valid_source;
            if (apply_projection(M, u, v, d, target.width(), target.height()).valid) ++out.count;
        }
    }
    if (out.valid_source == 0)
        throw UndefinedOverlap("overlap_fraction: source depth has no valid pixels");
    out.fraction = static_cast<double>(out.count) / static_cast<double>(out.valid_source);
    return out;
}

// ---------------------------------------------------------------------------------------------
// PLY

namespace {

template <class T>
void put_le(std::ostream& os, T value) {
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), bytes.size());
}

template <class T>
T get_le(std::istream& is) {
    std::array<char, sizeof(T)> bytes{};
    if (!is.read(bytes.data(), bytes.size())) throw std::runtime_error("read_ply: truncated vertex data");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

std::uint8_t to_u8(float c) {
    c = std::clamp(c, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_ply(const std::string& path, const PointCloud& cloud) {
    if (cloud.points.size() != cloud.colors.size())
        throw std::invalid_argument("write_ply: points and colors differ in length");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_ply: cannot open " + path);
    os << "ply\n"
       << "format binary_little_endian 1.0\n"
       << "element vertex " << cloud.size() << "\n"
       << "property float x\nproperty float y\nproperty float z\n"
       << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
       << "end_header\n";
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int k = 0; k < 3; ++k) put_le<float>(os, static_cast<float>(cloud.points[i][k]));
        for (int k = 0; k < 3; ++k) put_le<std::uint8_t>(os, to_u8(cloud.colors[i][k]));
    }
    if (!os) throw std::runtime_error("write_ply: write failed for " + path);
}

PointCloud read_ply(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_ply: cannot open " + path);
    std::string line;
    std::size_t count = 0;
    bool binary_le = false;
    while (std::getline(is, line)) {
        if (line.rfind("format", 0) == 0) binary_le = line.find("binary_little_endian") != std::string::npos;
        if (line.rfind("element vertex", 0) == 0) std::istringstream(line.substr(14)) >> count;
        if (line == "end_header") break;
    }
    if (!binary_le) throw std::runtime_error("read_ply: only binary_little_endian is supported");
    PointCloud cloud;
    for (std::size_t i = 0; i < count; ++i) {
        Vec3 p;
        for (int k = 0; k < 3; ++k) p[k] = get_le<float>(is);
        Eigen::Vector3f c;
        for (int k = 0; k < 3; ++k) c[k] = get_le<std::uint8_t>(is) / 255.0f;
        cloud.points.push_back(p);
        cloud.colors.push_back(c);
    }
    return cloud;
}

}  // namespace raydiff
