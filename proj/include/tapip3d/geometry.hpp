#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tapip3d/error.hpp"

namespace tapip3d {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CameraIntrinsics {
  double fx = 60.0;
  double fy = 60.0;
  double cx = 32.0;
  double cy = 24.0;
  int width = 64;
  int height = 48;

  void validate() const {
    require(fx > 0.0 && fy > 0.0, ErrorCode::kConfig, "focal lengths must be positive");
    require(width > 0 && height > 0, ErrorCode::kConfig, "image size must be positive");
    require(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height, ErrorCode::kConfig,
            "principal point outside image");
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

/// Camera-to-world pose (or any rigid map p -> R p + t).
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_axis_angle(const Vec3& axis_angle, const Vec3& translation) {
    RigidTransform out;
    const double angle = axis_angle.norm();
    if (angle > 0.0) out.rotation = Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
    out.translation = translation;
    return out;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
  }

  /// (this * other)(p) = this(other(p)).
  RigidTransform operator*(const RigidTransform& other) const {
    RigidTransform out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  bool is_valid(double tol = 1e-6) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }

  void validate(double tol = 1e-6) const {
    require(is_valid(tol), ErrorCode::kConfig, "rotation is not orthonormal with det 1");
  }

  /// 12 row-major numbers [R | t], the on-disk pose layout.
  std::array<double, 12> to_row_major() const {
    std::array<double, 12> out{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out[r * 4 + c] = rotation(r, c);
      out[r * 4 + 3] = translation(r);
    }
    return out;
  }

  static RigidTransform from_row_major(std::span<const double> v) {
    require(v.size() == 12, ErrorCode::kFormat, "pose must have 12 numbers");
    RigidTransform out;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out.rotation(r, c) = v[r * 4 + c];
      out.translation(r) = v[r * 4 + 3];
    }
    return out;
  }

  Vec3 axis_angle() const {
    Eigen::AngleAxisd aa(rotation);
    return aa.axis() * aa.angle();
  }
};

enum class CoordinateSystem { kUVD, kUVLogD, kXYZCamera, kXYZWorld };

inline std::string_view to_string(CoordinateSystem mode) {
  switch (mode) {
    case CoordinateSystem::kUVD: return "uvd";
    case CoordinateSystem::kUVLogD: return "uvlogd";
    case CoordinateSystem::kXYZCamera: return "camera";
    case CoordinateSystem::kXYZWorld: return "world";
  }
  return "unknown";
}

inline CoordinateSystem parse_coordinate_system(std::string_view name) {
  if (name == "uvd") return CoordinateSystem::kUVD;
  if (name == "uvlogd") return CoordinateSystem::kUVLogD;
  if (name == "camera") return CoordinateSystem::kXYZCamera;
  if (name == "world") return CoordinateSystem::kXYZWorld;
  fail(ErrorCode::kConfig, "unknown coordinate system '" + std::string(name) + "'");
}

inline bool is_image_space(CoordinateSystem mode) {
  return mode == CoordinateSystem::kUVD || mode == CoordinateSystem::kUVLogD;
}

struct ScaleFactor {
  double sigma = 1.0;
};

struct Projection {
  Vec2 uv = Vec2::Zero();
  bool behind_camera = false;
};

/// Pinhole projection. Out-of-image coordinates are returned as-is.
inline Projection project(const Vec3& p, const CameraIntrinsics& intr) {
  require(p.z() != 0.0, ErrorCode::kDegenerateProjection, "point lies on the camera plane (z = 0)");
  Projection out;
  out.uv = {intr.fx * p.x() / p.z() + intr.cx, intr.fy * p.y() / p.z() + intr.cy};
  out.behind_camera = p.z() < 0.0;
  return out;
}

inline Vec3 unproject(double u, double v, double depth, const CameraIntrinsics& intr) {
  require(std::isfinite(depth) && depth > 0.0, ErrorCode::kInvalidDepth,
          "depth must be positive and finite");
  return {(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth};
}

inline bool is_valid_depth(double depth) { return std::isfinite(depth) && depth > 0.0; }

inline Vec3 to_world(const Vec3& p_camera, const RigidTransform& camera_to_world) {
  return camera_to_world.apply(p_camera);
}

inline Vec3 to_camera(const Vec3& p_world, const RigidTransform& camera_to_world) {
  return camera_to_world.rotation.transpose() * (p_world - camera_to_world.translation);
}

namespace detail {

inline Vec3 to_camera_hub(const Vec3& p, CoordinateSystem from, const CameraIntrinsics& intr,
                          const std::optional<RigidTransform>& pose) {
  switch (from) {
    case CoordinateSystem::kXYZCamera: return p;
    case CoordinateSystem::kXYZWorld:
      require(pose.has_value(), ErrorCode::kConfig, "world coordinates need a camera pose");
      return to_camera(p, *pose);
    case CoordinateSystem::kUVD: return unproject(p.x(), p.y(), p.z(), intr);
    case CoordinateSystem::kUVLogD:
      require(std::isfinite(p.z()), ErrorCode::kInvalidDepth, "log-depth must be finite");
      return unproject(p.x(), p.y(), std::exp(p.z()), intr);
  }
  fail(ErrorCode::kInternal, "unhandled coordinate system");
}

inline Vec3 from_camera_hub(const Vec3& p, CoordinateSystem to, const CameraIntrinsics& intr,
                            const std::optional<RigidTransform>& pose) {
  switch (to) {
    case CoordinateSystem::kXYZCamera: return p;
    case CoordinateSystem::kXYZWorld:
      require(pose.has_value(), ErrorCode::kConfig, "world coordinates need a camera pose");
      return to_world(p, *pose);
    case CoordinateSystem::kUVD: {
      const Projection proj = project(p, intr);
      return {proj.uv.x(), proj.uv.y(), p.z()};
    }
    case CoordinateSystem::kUVLogD: {
      require(p.z() > 0.0, ErrorCode::kInvalidDepth, "log-depth needs positive depth");
      const Projection proj = project(p, intr);
      return {proj.uv.x(), proj.uv.y(), std::log(p.z())};
    }
  }
  fail(ErrorCode::kInternal, "unhandled coordinate system");
}

}  // namespace detail

/// Converts between the four tracking spaces, routing through camera XYZ.
/// `pose` is the camera-to-world pose of the frame the point belongs to and is
/// only consulted when world coordinates are involved.
inline Vec3 convert_coords(const Vec3& p, CoordinateSystem from, CoordinateSystem to,
                           const CameraIntrinsics& intr,
                           const std::optional<RigidTransform>& pose = std::nullopt) {
  if (from == to) return p;
  return detail::from_camera_hub(detail::to_camera_hub(p, from, intr, pose), to, intr, pose);
}

/// Population standard deviation over all coordinate components of the points
/// whose depth is within `depth_upper_bound` (when given).
inline ScaleFactor compute_scale_factor(std::span<const Vec3> points, std::span<const double> depths,
                                        std::optional<double> depth_upper_bound = std::nullopt) {
  require(points.size() == depths.size(), ErrorCode::kShape, "points/depths length mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  auto keep = [&](std::size_t i) {
    return !depth_upper_bound.has_value() || depths[i] <= *depth_upper_bound;
  };
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!keep(i)) continue;
    sum += points[i].sum();
    ++count;
  }
  require(count >= 2, ErrorCode::kDegenerateScale, "fewer than two points survive the depth filter");
  const double mean = sum / static_cast<double>(3 * count);
  double sq = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!keep(i)) continue;
    sq += (points[i].array() - mean).square().sum();
  }
  const double sigma = std::sqrt(sq / static_cast<double>(3 * count));
  require(std::isfinite(sigma) && sigma > 0.0, ErrorCode::kDegenerateScale, "zero spread");
  return {sigma};
}

/// Camera-frame points; depth is taken as z.
inline ScaleFactor compute_scale_factor(std::span<const Vec3> points,
                                        std::optional<double> depth_upper_bound = std::nullopt) {
  std::vector<double> depths(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) depths[i] = points[i].z();
  return compute_scale_factor(points, depths, depth_upper_bound);
}

struct RigidSequenceConfig {
  double rotation_deg = 0.0;     // max keyframe rotation angle
  double translation = 0.0;      // max keyframe translation per axis
  int keyframe_interval = 8;

  /// Upper bound on the rotation between consecutive frames implied by the
  /// keyframe interpolation.
  double max_step_rotation_deg() const { return 2.0 * rotation_deg / keyframe_interval; }
};

/// Smooth random rigid motion: random axis-angle/translation keyframes every
/// `keyframe_interval` frames, linearly interpolated componentwise.
inline std::vector<RigidTransform> random_rigid_sequence(int num_frames, const RigidSequenceConfig& config,
                                                         std::uint64_t seed) {
  require(num_frames >= 1, ErrorCode::kConfig, "num_frames must be >= 1");
  require(config.keyframe_interval >= 1, ErrorCode::kConfig, "keyframe_interval must be >= 1");
  require(config.rotation_deg >= 0.0 && config.rotation_deg <= 180.0, ErrorCode::kConfig,
          "rotation magnitude must lie in [0, 180] degrees");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double max_angle = config.rotation_deg * M_PI / 180.0;

  const int num_keys = (num_frames - 1) / config.keyframe_interval + 2;
  std::vector<Vec3> key_rot(num_keys), key_trans(num_keys);
  for (int k = 0; k < num_keys; ++k) {
    Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
    if (axis.norm() < 1e-12) axis = Vec3::UnitZ();
    axis.normalize();
    const double angle = max_angle * unit(rng);
    key_rot[k] = axis * angle;
    for (int d = 0; d < 3; ++d) key_trans[k](d) = config.translation * (2.0 * unit(rng) - 1.0);
  }

  std::vector<RigidTransform> out;
  out.reserve(num_frames);
  for (int f = 0; f < num_frames; ++f) {
    const int k = f / config.keyframe_interval;
    const double a = static_cast<double>(f % config.keyframe_interval) / config.keyframe_interval;
    const Vec3 rot = (1.0 - a) * key_rot[k] + a * key_rot[k + 1];
    const Vec3 trans = (1.0 - a) * key_trans[k] + a * key_trans[k + 1];
    out.push_back(RigidTransform::from_axis_angle(rot, trans));
  }
  return out;
}

/// Geodesic angle (radians) between two rotations.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace tapip3d
