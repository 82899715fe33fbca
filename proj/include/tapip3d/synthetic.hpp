#pragma once

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/scene.hpp"

namespace tapip3d {

enum class BodyShape { kEllipsoid, kPlane };

/// A rigid body with constant-twist motion: at time s its pose is
/// (R0 * exp(angular * s), center + linear * s) relative to the world.
struct BodySpec {
  BodyShape shape = BodyShape::kEllipsoid;
  Vec3 extent = Vec3(0.4, 0.4, 0.4);  // radii (ellipsoid) or half sizes (plane, z ignored)
  Vec3 center = Vec3(0.0, 0.0, 3.0);
  Vec3 orientation = Vec3::Zero();  // axis-angle
  Vec3 linear = Vec3::Zero();       // per frame
  Vec3 angular = Vec3::Zero();      // axis-angle per frame
  Vec3 color = Vec3(0.5, 0.5, 0.5);
  int points = 2000;
};

struct SceneSpec {
  int frames = 24;
  CameraIntrinsics intrinsics;
  int bodies = 3;               // random bodies, used when `body_list` is empty
  int points_per_body = 2000;
  std::vector<BodySpec> body_list;
  bool background = true;       // static textured wall behind the bodies
  double background_depth = 6.0;
  Vec3 camera_linear = Vec3(0.01, 0.0, 0.0);   // per frame
  Vec3 camera_angular = Vec3(0.0, 0.004, 0.0);  // axis-angle per frame
  double body_speed = 0.03;     // scale of random body velocities
  double body_spin = 0.03;      // scale of random angular velocities (rad/frame)
  int splat_radius = 1;         // half size of the square pixel footprint
  double surface_epsilon = 0.05;
  double near_plane = 0.05;
  int queries = 32;
  int query_frame_max = 0;      // query frames drawn uniformly from [0, max]
  bool palindrome = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(frames >= 1, ErrorCode::kConfig, "scene needs at least one frame");
    intrinsics.validate();
    require(bodies >= 1 || !body_list.empty(), ErrorCode::kConfig, "scene needs at least one body");
    require(points_per_body >= 1, ErrorCode::kConfig, "bodies need points");
    require(splat_radius >= 0 && surface_epsilon >= 0 && near_plane > 0, ErrorCode::kConfig, "invalid render settings");
    require(queries >= 0 && query_frame_max >= 0 && query_frame_max < frames, ErrorCode::kConfig,
            "invalid query settings");
    for (const auto& b : body_list) require(b.points >= 1, ErrorCode::kConfig, "bodies need points");
  }
};

/// Motion reverses at the midpoint: frame s and frame S-1-s coincide.
inline SceneSpec palindrome(SceneSpec spec) {
  spec.palindrome = true;
  return spec;
}

/// A near plane half-covering a far plane, static camera: the case where
/// image-plane windows and 3D neighborhoods disagree.
inline SceneSpec two_plane_spec(std::uint64_t seed = 0) {
  SceneSpec spec;
  spec.frames = 16;
  spec.seed = seed;
  spec.background = false;
  spec.camera_linear = Vec3::Zero();
  spec.camera_angular = Vec3::Zero();
  BodySpec far;
  far.shape = BodyShape::kPlane;
  far.extent = Vec3(3.0, 2.2, 0.0);
  far.center = Vec3(0.0, 0.0, 4.0);
  far.color = Vec3(0.2, 0.4, 0.8);
  far.points = 12000;
  BodySpec near = far;
  near.extent = Vec3(0.8, 1.2, 0.0);
  near.center = Vec3(-0.7, 0.0, 2.0);
  near.color = Vec3(0.9, 0.5, 0.1);
  near.points = 6000;
  spec.body_list = {far, near};
  spec.queries = 16;
  return spec;
}

struct SyntheticScene {
  SceneBundle bundle;
  std::vector<int> track_body;  // owning body of each GT track
  std::vector<std::vector<Vec3>> body_points;  // body-local points
  std::vector<std::vector<Vec3>> body_colors;
  std::vector<BodySpec> bodies;  // background last when present
};

namespace detail {

inline Mat3 rotation_from(const Vec3& aa) {
  const double angle = aa.norm();
  if (angle == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, aa / angle).toRotationMatrix();
}

inline double motion_time(const SceneSpec& spec, int s) {
  return spec.palindrome ? static_cast<double>(std::min(s, spec.frames - 1 - s)) : static_cast<double>(s);
}

inline RigidTransform body_pose(const BodySpec& b, double time) {
  RigidTransform t;
  t.rotation = rotation_from(b.orientation) * rotation_from(b.angular * time);
  t.translation = b.center + b.linear * time;
  return t;
}

inline RigidTransform camera_pose(const SceneSpec& spec, double time) {
  RigidTransform t;
  t.rotation = rotation_from(spec.camera_angular * time);
  t.translation = spec.camera_linear * time;
  return t;
}

/// Smooth body-local color texture plus a little per-point noise.
inline Vec3 texture(const Vec3& base, const Vec3& local, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  Vec3 c;
  c.x() = base.x() + 0.25 * std::sin(7.0 * local.x() + 1.3 * local.y());
  c.y() = base.y() + 0.25 * std::sin(6.0 * local.y() - 2.1 * local.z());
  c.z() = base.z() + 0.25 * std::sin(5.0 * local.z() + 3.7 * local.x());
  for (int k = 0; k < 3; ++k) c(k) = std::clamp(c(k) + noise(rng), 0.0, 1.0);
  return c;
}

inline std::vector<Vec3> sample_body(const BodySpec& b, std::mt19937_64& rng) {
  std::vector<Vec3> pts;
  pts.reserve(b.points);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < b.points; ++i) {
    if (b.shape == BodyShape::kEllipsoid) {
      Vec3 d(n(rng), n(rng), n(rng));
      d /= std::max(d.norm(), 1e-12);
      pts.push_back(d.cwiseProduct(b.extent));
    } else {
      pts.push_back({u(rng) * b.extent.x(), u(rng) * b.extent.y(), 0.0});
    }
  }
  return pts;
}

inline std::vector<BodySpec> random_bodies(const SceneSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.0, 1.0);
  std::vector<BodySpec> out;
  const auto& intr = spec.intrinsics;
  for (int i = 0; i < spec.bodies; ++i) {
    BodySpec b;
    b.points = spec.points_per_body;
    b.extent = Vec3(0.35 + 0.25 * pos(rng), 0.35 + 0.25 * pos(rng), 0.35 + 0.25 * pos(rng));
    const double depth = 2.5 + 1.5 * pos(rng);
    const double px = intr.width * (0.2 + 0.6 * pos(rng));
    const double py = intr.height * (0.2 + 0.6 * pos(rng));
    b.center = unproject(px, py, depth, intr);
    b.orientation = Vec3(u(rng), u(rng), u(rng)) * M_PI;
    b.linear = Vec3(u(rng), u(rng), 0.3 * u(rng)) * spec.body_speed;
    b.angular = Vec3(u(rng), u(rng), u(rng)) * spec.body_spin;
    b.color = Vec3(0.2 + 0.6 * pos(rng), 0.2 + 0.6 * pos(rng), 0.2 + 0.6 * pos(rng));
    out.push_back(b);
  }
  return out;
}

/// Flat wall covering the view frustum over all camera poses.
inline BodySpec background_body(const SceneSpec& spec) {
  const auto& intr = spec.intrinsics;
  const double d = spec.background_depth;
  const double travel = spec.camera_linear.norm() * spec.frames + spec.camera_angular.norm() * spec.frames * d;
  BodySpec b;
  b.shape = BodyShape::kPlane;
  b.extent = Vec3(0.5 * intr.width * d / intr.fx * 1.3 + travel, 0.5 * intr.height * d / intr.fy * 1.3 + travel, 0.0);
  b.center = Vec3((intr.width * 0.5 - intr.cx) * d / intr.fx, (intr.height * 0.5 - intr.cy) * d / intr.fy, d);
  b.color = Vec3(0.45, 0.45, 0.45);
  const double spacing = 0.6 * d / intr.fx;  // finer than one pixel at the wall
  b.points = static_cast<int>(std::ceil(4.0 * b.extent.x() * b.extent.y() / (spacing * spacing)));
  return b;
}

struct Splat {
  double z;
  int body;
  int point;
  bool operator<(const Splat& o) const {
    if (z != o.z) return z < o.z;
    if (body != o.body) return body < o.body;
    return point < o.point;
  }
};

}  // namespace detail

/// Rendered state of one frame: per pixel winner (nearest splat).
struct FrameRender {
  std::vector<detail::Splat> winner;  // z = +inf where empty
};

/// Renders bodies (already posed into the camera frame) with square splats
/// and a z-buffer; nearest wins, ties by body id then point index.
inline FrameRender render_frame(const std::vector<std::vector<Vec3>>& camera_points, const CameraIntrinsics& intr,
                                int splat_radius, double near_plane) {
  FrameRender out;
  const double inf = std::numeric_limits<double>::infinity();
  out.winner.assign(std::size_t(intr.width) * intr.height, {inf, -1, -1});
  for (int b = 0; b < static_cast<int>(camera_points.size()); ++b) {
    for (int i = 0; i < static_cast<int>(camera_points[b].size()); ++i) {
      const Vec3& p = camera_points[b][i];
      if (!(p.z() > near_plane)) continue;
      const Vec2 uv = project(p, intr).uv;
      const double cu = std::round(uv.x()), cv = std::round(uv.y());
      if (cu < -splat_radius || cv < -splat_radius || cu > intr.width - 1 + splat_radius ||
          cv > intr.height - 1 + splat_radius)
        continue;
      const detail::Splat s{p.z(), b, i};
      for (int dv = -splat_radius; dv <= splat_radius; ++dv) {
        for (int du = -splat_radius; du <= splat_radius; ++du) {
          const int c = static_cast<int>(cu) + du, r = static_cast<int>(cv) + dv;
          if (c < 0 || r < 0 || c >= intr.width || r >= intr.height) continue;
          auto& w = out.winner[std::size_t(r) * intr.width + c];
          if (s < w) w = s;
        }
      }
    }
  }
  return out;
}

/// Pixel (col, row) holding a camera-frame point, or nullopt when it projects
/// outside the image or lies behind the near plane.
inline std::optional<std::pair<int, int>> pixel_of(const Vec3& p, const CameraIntrinsics& intr, double near_plane) {
  if (!(p.z() > near_plane)) return std::nullopt;
  const Vec2 uv = project(p, intr).uv;
  const double c = std::round(uv.x()), r = std::round(uv.y());
  if (c < 0 || r < 0 || c >= intr.width || r >= intr.height) return std::nullopt;
  return std::make_pair(static_cast<int>(c), static_cast<int>(r));
}

/// Deterministic scene generation.
///
/// A GT track is visible at a frame when it is in front of the camera, inside
/// the image, no splat covering its pixel is nearer than z - surface_epsilon,
/// and no nearer visible track claims the same pixel. Each pixel holds the 3D
/// point of its winning splat (within splat_radius + 0.5 px of the pixel
/// center); visible tracks claim their own pixel, so the point map contains
/// them exactly.
inline SyntheticScene generate(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticScene out;
  out.bodies = spec.body_list.empty() ? detail::random_bodies(spec, rng) : spec.body_list;
  if (spec.background) out.bodies.push_back(detail::background_body(spec));
  for (const auto& b : out.bodies) {
    out.body_points.push_back(detail::sample_body(b, rng));
    std::vector<Vec3> colors;
    for (const auto& p : out.body_points.back()) colors.push_back(detail::texture(b.color, p, rng));
    out.body_colors.push_back(std::move(colors));
  }

  const auto& intr = spec.intrinsics;
  const int S = spec.frames, W = intr.width, H = intr.height;
  const int B = static_cast<int>(out.bodies.size());
  SceneBundle& scene = out.bundle;
  scene.frames = S;
  scene.width = W;
  scene.height = H;
  scene.intrinsics = intr;
  scene.poses = std::vector<RigidTransform>();
  scene.rgb.assign(std::size_t(S) * W * H * 3, 0);
  scene.pointmap.assign(std::size_t(S) * W * H * 3, 0.0f);
  scene.valid.assign(std::size_t(S) * W * H, 0);

  std::vector<std::vector<std::vector<Vec3>>> cam_points(S, std::vector<std::vector<Vec3>>(B));
  std::vector<FrameRender> renders;
  for (int s = 0; s < S; ++s) {
    const double time = detail::motion_time(spec, s);
    const RigidTransform cam = detail::camera_pose(spec, time);
    scene.poses->push_back(cam);
    for (int b = 0; b < B; ++b) {
      const bool is_background = spec.background && b == B - 1;
      const RigidTransform pose = detail::body_pose(out.bodies[b], is_background ? 0.0 : time);
      auto& dst = cam_points[s][b];
      dst.reserve(out.body_points[b].size());
      for (const auto& p : out.body_points[b]) dst.push_back(to_camera(pose.apply(p), cam));
    }
    renders.push_back(render_frame(cam_points[s], intr, spec.splat_radius, spec.near_plane));
  }

  // Queries: points visible at their query frame, round-robin over bodies.
  std::uniform_int_distribution<int> frame_dist(0, spec.query_frame_max);
  std::vector<std::pair<int, int>> chosen;  // (body, point)
  std::vector<int> query_frames;
  std::vector<std::vector<std::uint8_t>> used(B);
  for (int b = 0; b < B; ++b) used[b].assign(out.body_points[b].size(), 0);
  auto directly_visible = [&](int s, int b, int i) {
    const auto px = pixel_of(cam_points[s][b][i], intr, spec.near_plane);
    if (!px) return false;
    const auto& w = renders[s].winner[std::size_t(px->second) * W + px->first];
    return !(w.z < cam_points[s][b][i].z() - spec.surface_epsilon);
  };
  int attempts = 0;
  while (static_cast<int>(chosen.size()) < spec.queries && attempts < spec.queries * 1000) {
    const int b = static_cast<int>(chosen.size() + attempts) % B;
    ++attempts;
    const int tq = frame_dist(rng);
    std::uniform_int_distribution<int> pd(0, static_cast<int>(out.body_points[b].size()) - 1);
    const int i = pd(rng);
    if (used[b][i] || !directly_visible(tq, b, i)) continue;
    bool clash = false;  // keep query pixels distinct in their frame
    const auto px = pixel_of(cam_points[tq][b][i], intr, spec.near_plane);
    for (std::size_t k = 0; k < chosen.size() && !clash; ++k)
      if (query_frames[k] == tq && pixel_of(cam_points[tq][chosen[k].first][chosen[k].second], intr,
                                            spec.near_plane) == px)
        clash = true;
    if (clash) continue;
    used[b][i] = 1;
    chosen.emplace_back(b, i);
    query_frames.push_back(tq);
  }
  require(static_cast<int>(chosen.size()) == spec.queries, ErrorCode::kConfig,
          "could not place " + std::to_string(spec.queries) + " visible queries");

  const int Q = spec.queries;
  GroundTruth gt;
  gt.queries = Q;
  gt.tracks.assign(std::size_t(Q) * S * 3, 0.0f);
  gt.visible.assign(std::size_t(Q) * S, 0);
  gt.valid.assign(std::size_t(Q) * S, 0);
  for (int s = 0; s < S; ++s) {
    // Track visibility: occlusion test, then one visible track per pixel.
    std::vector<int> owner(std::size_t(W) * H, -1);
    for (int q = 0; q < Q; ++q) {
      const auto [b, i] = chosen[q];
      const Vec3& p = cam_points[s][b][i];
      const std::size_t o = std::size_t(q) * S + s;
      for (int k = 0; k < 3; ++k) gt.tracks[o * 3 + k] = static_cast<float>(p(k));
      gt.valid[o] = p.z() > spec.near_plane ? 1 : 0;
      if (!directly_visible(s, b, i)) continue;
      const auto px = pixel_of(p, intr, spec.near_plane);
      int& own = owner[std::size_t(px->second) * W + px->first];
      if (own >= 0) {
        const auto [ob, oi] = chosen[own];
        if (!(detail::Splat{p.z(), b, i} < detail::Splat{cam_points[s][ob][oi].z(), ob, oi})) continue;
        gt.visible[std::size_t(own) * S + s] = 0;
      }
      own = q;
      gt.visible[o] = 1;
    }
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const std::size_t pix = std::size_t(r) * W + c;
        const std::size_t idx = std::size_t(s) * W * H + pix;
        int b, i;
        if (owner[pix] >= 0) {
          std::tie(b, i) = chosen[owner[pix]];
        } else {
          const auto& w = renders[s].winner[pix];
          if (w.body < 0) continue;
          b = w.body;
          i = w.point;
        }
        // The pixel stores the surface point itself, so static geometry maps
        // to the same world point in every frame.
        const Vec3& p = cam_points[s][b][i];
        const Vec3& color = out.body_colors[b][i];
        scene.valid[idx] = 1;
        for (int k = 0; k < 3; ++k) {
          scene.pointmap[idx * 3 + k] = static_cast<float>(p(k));
          scene.rgb[idx * 3 + k] = static_cast<std::uint8_t>(std::lround(color(k) * 255.0));
        }
      }
    }
  }
  scene.queries.resize(std::size_t(Q) * 4);
  for (int q = 0; q < Q; ++q) {
    const std::size_t o = (std::size_t(q) * S + query_frames[q]) * 3;
    scene.queries[std::size_t(q) * 4] = static_cast<float>(query_frames[q]);
    for (int k = 0; k < 3; ++k) scene.queries[std::size_t(q) * 4 + 1 + k] = gt.tracks[o + k];
    out.track_body.push_back(chosen[q].first);
  }
  scene.ground_truth = std::move(gt);
  return out;
}

/// Built-in consistency check of a generated bundle: every visible GT point
/// is the point stored at its pixel (depth and projection agree).
struct VerifyReport {
  bool ok = true;
  double max_depth_error = 0.0;
  double max_reprojection_error = 0.0;
  int visible_points = 0;
};

inline VerifyReport verify_ground_truth(const SceneBundle& scene, double depth_tol = 1e-6, double pixel_tol = 1e-5) {
  VerifyReport rep;
  if (!scene.ground_truth) return rep;
  const auto& intr = scene.intrinsics;
  for (int q = 0; q < scene.query_count(); ++q) {
    for (int s = 0; s < scene.frames; ++s) {
      if (!scene.ground_truth->visible[std::size_t(q) * scene.frames + s]) continue;
      ++rep.visible_points;
      const Vec3 p = scene.gt_position(q, s);
      const Vec2 uv = project(p, intr).uv;
      const int c = static_cast<int>(std::round(uv.x())), r = static_cast<int>(std::round(uv.y()));
      if (c < 0 || r < 0 || c >= scene.width || r >= scene.height) {
        rep.ok = false;
        continue;
      }
      const std::size_t pix = std::size_t(r) * scene.width + c;
      const Vec3 m = scene.camera_point(s, pix);
      // Depth from the f32 point map vs the f32 track.
      const double dz = std::abs(m.z() - p.z());
      const Vec2 back = project(m, intr).uv;
      const double du = (back - uv).norm();
      rep.max_depth_error = std::max(rep.max_depth_error, dz);
      rep.max_reprojection_error = std::max(rep.max_reprojection_error, du);
      if (dz > depth_tol * std::max(1.0, p.z()) || du > pixel_tol || !scene.valid[std::size_t(s) * scene.pixels() + pix])
        rep.ok = false;
    }
  }
  return rep;
}

}  // namespace tapip3d
