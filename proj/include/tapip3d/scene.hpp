#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/feature_cloud.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/trajectory.hpp"

namespace tapip3d {

/// Precomputed feature grid [S, H', W', C].
struct FeatureTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  std::size_t frame_size() const { return std::size_t(height) * width * channels; }
};

/// Ground-truth tracks, camera frame of each frame.
struct GroundTruth {
  int queries = 0;
  std::vector<float> tracks;          // [Q, S, 3]
  std::vector<std::uint8_t> visible;  // [Q, S]
  std::vector<std::uint8_t> valid;    // [Q, S]
};

/// In-memory scene: per-frame camera-frame point maps, optional RGB, poses,
/// features, ground truth, and queries (t_q, x, y, z) in the camera frame of t_q.
struct SceneBundle {
  int frames = 0;
  int width = 0;
  int height = 0;
  CameraIntrinsics intrinsics;
  std::optional<std::vector<RigidTransform>> poses;  // camera-to-world per frame
  std::vector<std::uint8_t> rgb;                     // [S, H, W, 3], may be empty
  std::vector<float> pointmap;                       // [S, H, W, 3]
  std::vector<std::uint8_t> valid;                   // [S, H, W]
  std::optional<FeatureTensor> features;
  std::optional<GroundTruth> ground_truth;
  std::vector<float> queries;  // [Q, 4]

  std::size_t pixels() const { return std::size_t(width) * height; }
  int query_count() const { return static_cast<int>(queries.size() / 4); }

  std::optional<RigidTransform> pose(int frame) const {
    if (!poses) return std::nullopt;
    return (*poses)[frame];
  }

  Vec3 camera_point(int frame, std::size_t pixel) const {
    const std::size_t o = (std::size_t(frame) * pixels() + pixel) * 3;
    return {pointmap[o], pointmap[o + 1], pointmap[o + 2]};
  }

  bool has_rgb() const { return !rgb.empty(); }

  Image image(int frame) const {
    require(has_rgb(), ErrorCode::kFormat, "scene has no RGB frames");
    Image img{width, height, std::vector<float>(pixels() * 3)};
    const std::size_t base = std::size_t(frame) * pixels() * 3;
    for (std::size_t i = 0; i < pixels() * 3; ++i) img.rgb[i] = static_cast<float>(rgb[base + i]) / 255.0f;
    return img;
  }

  /// Frame point map converted into `mode` (unscaled).
  PointMap point_map(int frame, CoordinateSystem mode) const {
    PointMap pm(width, height);
    const auto pose_t = pose(frame);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        const std::size_t i = pm.index(r, c);
        if (!valid[std::size_t(frame) * pixels() + i]) continue;
        const Vec3 cam = camera_point(frame, i);
        if (!is_valid_depth(cam.z())) continue;
        pm.valid[i] = 1;
        pm.coords[i] = convert_coords(cam, CoordinateSystem::kXYZCamera, mode, intrinsics, pose_t);
      }
    }
    return pm;
  }

  std::vector<Query> query_list() const {
    std::vector<Query> out;
    for (int q = 0; q < query_count(); ++q) {
      const float* v = &queries[std::size_t(q) * 4];
      out.push_back({q, static_cast<int>(v[0]), Vec3(v[1], v[2], v[3])});
    }
    return out;
  }

  Vec3 gt_position(int q, int frame) const {
    const auto& gt = ground_truth.value();
    const std::size_t o = (std::size_t(q) * frames + frame) * 3;
    return {gt.tracks[o], gt.tracks[o + 1], gt.tracks[o + 2]};
  }

  void validate() const {
    require(frames >= 1 && width >= 1 && height >= 1, ErrorCode::kShape, "empty scene");
    intrinsics.validate();
    require(intrinsics.width == width && intrinsics.height == height, ErrorCode::kShape,
            "intrinsics resolution differs from the frames");
    require(pointmap.size() == std::size_t(frames) * pixels() * 3, ErrorCode::kShape, "pointmap size mismatch");
    require(valid.size() == std::size_t(frames) * pixels(), ErrorCode::kShape, "valid mask size mismatch");
    require(rgb.empty() || rgb.size() == std::size_t(frames) * pixels() * 3, ErrorCode::kShape, "rgb size mismatch");
    if (poses) {
      require(static_cast<int>(poses->size()) == frames, ErrorCode::kShape, "one pose per frame required");
      for (const auto& p : *poses) p.validate();
    }
    if (features)
      require(features->data.size() == features->frame_size() * frames, ErrorCode::kShape,
              "feature tensor size mismatch");
    require(queries.size() % 4 == 0, ErrorCode::kShape, "queries must be [Q, 4]");
    for (int q = 0; q < query_count(); ++q) {
      const float t = queries[std::size_t(q) * 4];
      require(t >= 0 && t < frames && t == static_cast<float>(static_cast<int>(t)), ErrorCode::kShape,
              "query " + std::to_string(q) + " has an invalid frame index");
    }
    if (ground_truth) {
      const auto& gt = *ground_truth;
      require(gt.queries == query_count(), ErrorCode::kShape, "ground truth and queries disagree on Q");
      const std::size_t qs = std::size_t(gt.queries) * frames;
      require(gt.tracks.size() == qs * 3 && gt.visible.size() == qs && gt.valid.size() == qs, ErrorCode::kShape,
              "ground truth size mismatch");
    }
  }
};

/// Same scene played backwards: every per-frame tensor, pose, ground-truth
/// frame and query frame index is flipped. Applying it twice is the identity.
inline SceneBundle reverse_in_time(const SceneBundle& in) {
  SceneBundle out = in;
  const int S = in.frames;
  auto flip = [S](const auto& src, auto& dst, std::size_t per_frame) {
    for (int s = 0; s < S; ++s)
      std::copy_n(src.begin() + std::size_t(S - 1 - s) * per_frame, per_frame, dst.begin() + std::size_t(s) * per_frame);
  };
  flip(in.pointmap, out.pointmap, in.pixels() * 3);
  flip(in.valid, out.valid, in.pixels());
  if (in.has_rgb()) flip(in.rgb, out.rgb, in.pixels() * 3);
  if (in.features) flip(in.features->data, out.features->data, in.features->frame_size());
  if (in.poses)
    for (int s = 0; s < S; ++s) (*out.poses)[s] = (*in.poses)[S - 1 - s];
  for (int q = 0; q < in.query_count(); ++q)
    out.queries[std::size_t(q) * 4] = static_cast<float>(S - 1 - static_cast<int>(in.queries[std::size_t(q) * 4]));
  if (in.ground_truth) {
    const auto& g = *in.ground_truth;
    auto& o = *out.ground_truth;
    for (int q = 0; q < g.queries; ++q) {
      for (int s = 0; s < S; ++s) {
        const std::size_t d = std::size_t(q) * S + s, src = std::size_t(q) * S + (S - 1 - s);
        o.visible[d] = g.visible[src];
        o.valid[d] = g.valid[src];
        for (int k = 0; k < 3; ++k) o.tracks[d * 3 + k] = g.tracks[src * 3 + k];
      }
    }
  }
  return out;
}

}  // namespace tapip3d
