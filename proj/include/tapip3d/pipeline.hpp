#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/feature_cloud.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/model.hpp"
#include "tapip3d/scene.hpp"
#include "tapip3d/trajectory.hpp"

namespace tapip3d {

enum class ScaleScope { kPerVideo, kPerWindow };

struct TrackOptions {
  CoordinateSystem mode = CoordinateSystem::kXYZCamera;
  std::optional<CoordinateSystem> output_mode;  // defaults to `mode`
  std::optional<double> depth_upper_bound;
  ScaleScope scale_scope = ScaleScope::kPerVideo;
  int support_grid = 0;
  bool include_support = false;
  bool bidirectional = false;
  std::optional<int> iterations;  // defaults to the model's M
};

/// Per query and frame: position (unscaled, output system), visibility,
/// pixel projection, validity. Frames not covered by the run are invalid.
struct TrackingResult {
  int queries = 0;
  int frames = 0;
  CoordinateSystem system = CoordinateSystem::kXYZCamera;
  double sigma = 1.0;
  CameraIntrinsics intrinsics;
  std::vector<RigidTransform> poses;     // camera-to-world per frame, empty without poses
  std::vector<float> positions;          // [Q, S, 3]
  std::vector<std::uint8_t> visibility;  // [Q, S]
  std::vector<float> pixels;             // [Q, S, 2]
  std::vector<std::uint8_t> valid;       // [Q, S]

  std::size_t index(int q, int s) const { return std::size_t(q) * frames + s; }
  Vec3 position(int q, int s) const {
    const std::size_t o = index(q, s) * 3;
    return {positions[o], positions[o + 1], positions[o + 2]};
  }
  Vec2 pixel(int q, int s) const {
    const std::size_t o = index(q, s) * 2;
    return {pixels[o], pixels[o + 1]};
  }

  void resize(int q, int s) {
    queries = q;
    frames = s;
    positions.assign(std::size_t(q) * s * 3, 0.0f);
    visibility.assign(std::size_t(q) * s, 0);
    pixels.assign(std::size_t(q) * s * 2, 0.0f);
    valid.assign(std::size_t(q) * s, 0);
  }
};

/// Window start frames: 0, T/2, T, ... until a window reaches the last frame.
inline std::vector<int> window_starts(int frames, int window) {
  require(frames >= 1 && window >= 2, ErrorCode::kConfig, "invalid video/window length");
  std::vector<int> out{0};
  while (out.back() + window < frames) out.push_back(out.back() + window / 2);
  return out;
}

/// Video frame of each slot; slots past the end repeat the final frame.
inline std::vector<int> window_frames(int start, int window, int frames) {
  std::vector<int> out(window);
  for (int t = 0; t < window; ++t) out[t] = std::min(start + t, frames - 1);
  return out;
}

/// Frame-0 grid of n x n auxiliary queries (pixel centers of an even grid),
/// lifted through the point map; cells without valid depth are skipped.
inline std::vector<Query> add_support_grid(const SceneBundle& scene, int grid_n, int first_id) {
  std::vector<Query> out;
  if (grid_n <= 0) return out;
  for (int i = 0; i < grid_n; ++i) {
    for (int j = 0; j < grid_n; ++j) {
      const int c = static_cast<int>((j + 0.5) * scene.width / grid_n);
      const int r = static_cast<int>((i + 0.5) * scene.height / grid_n);
      const std::size_t pix = std::size_t(r) * scene.width + c;
      if (!scene.valid[pix]) continue;
      const Vec3 p = scene.camera_point(0, pix);
      if (!is_valid_depth(p.z())) continue;
      out.push_back({first_id + static_cast<int>(out.size()), 0, p});
    }
  }
  return out;
}

/// Per-video state shared by all windows: active-space point maps, features
/// (and encoder caches when training), and the normalized frame geometry.
template <typename S>
struct VideoSession {
  const TrackerModel<S>* model = nullptr;
  CoordinateSystem mode = CoordinateSystem::kXYZCamera;
  CameraIntrinsics intrinsics;
  std::vector<std::optional<RigidTransform>> poses;
  std::vector<PointMap> maps;                      // unscaled active space
  std::vector<std::vector<double>> depths;         // camera depth per pixel
  std::vector<std::vector<Matrix<S>>> features;    // [frame][level]
  std::vector<typename ToyEncoder<S>::Cache> encoder_caches;
  std::vector<FrameGeometry> frames;
  double sigma = 0.0;

  int frame_count() const { return static_cast<int>(maps.size()); }

  /// Scale statistic over the given frames (all frames when empty).
  double compute_sigma(std::span<const int> which, std::optional<double> depth_upper_bound) const {
    std::vector<Vec3> pts;
    std::vector<double> ds;
    auto add = [&](int f) {
      for (std::size_t i = 0; i < maps[f].coords.size(); ++i) {
        if (!maps[f].valid[i]) continue;
        pts.push_back(maps[f].coords[i]);
        ds.push_back(depths[f][i]);
      }
    };
    if (which.empty()) {
      for (int f = 0; f < frame_count(); ++f) add(f);
    } else {
      std::vector<int> uniq(which.begin(), which.end());
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      for (int f : uniq) add(f);
    }
    return compute_scale_factor(pts, ds, depth_upper_bound).sigma;
  }

  /// Rebuilds the normalized geometry of every frame for a new sigma.
  void set_sigma(double s) {
    if (s == sigma && !frames.empty()) return;
    sigma = s;
    frames.clear();
    const auto& cfg = model->config();
    for (int f = 0; f < frame_count(); ++f)
      frames.push_back(build_frame_geometry(maps[f], cfg.encoder.stride, cfg.levels,
                                            FrameCamera{intrinsics, poses[f], mode, sigma}));
  }

  /// Active-space (unscaled) position of a camera-frame point of frame f.
  Vec3 to_active(const Vec3& camera_point, int f) const {
    return convert_coords(camera_point, CoordinateSystem::kXYZCamera, mode, intrinsics, poses[f]);
  }
};

template <typename S>
VideoSession<S> open_session(const TrackerModel<S>& model, const ParamStore<S>& params, const SceneBundle& scene,
                             CoordinateSystem mode, bool keep_encoder_cache) {
  scene.validate();
  if (mode == CoordinateSystem::kXYZWorld)
    require(scene.poses.has_value(), ErrorCode::kConfig, "world mode needs camera poses");
  VideoSession<S> v;
  v.model = &model;
  v.mode = mode;
  v.intrinsics = scene.intrinsics;
  for (int f = 0; f < scene.frames; ++f) {
    v.poses.push_back(scene.pose(f));
    v.maps.push_back(scene.point_map(f, mode));
    std::vector<double> d(scene.pixels(), 0.0);
    for (std::size_t i = 0; i < scene.pixels(); ++i) d[i] = scene.camera_point(f, i).z();
    v.depths.push_back(std::move(d));
  }
  // Geometry grids do not depend on sigma for validity; pool on unit-scale grids.
  v.set_sigma(1.0);
  for (int f = 0; f < scene.frames; ++f) {
    if (scene.features) {
      const auto& ft = *scene.features;
      Matrix<S> m(Eigen::Index(ft.height) * ft.width, ft.channels);
      const float* src = ft.data.data() + ft.frame_size() * f;
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(src[i]);
      v.features.push_back(model.frame_features(m, v.frames[f]));
    } else {
      typename ToyEncoder<S>::Cache cache;
      v.features.push_back(
          model.frame_features(params, scene.image(f), v.frames[f], keep_encoder_cache ? &cache : nullptr));
      if (keep_encoder_cache) v.encoder_caches.push_back(std::move(cache));
    }
  }
  return v;
}

/// Queries converted to the session's active space (unscaled).
template <typename S>
std::vector<Query> active_queries(const VideoSession<S>& v, std::span<const Query> camera_queries) {
  std::vector<Query> out;
  for (const auto& q : camera_queries) {
    require(q.frame >= 0 && q.frame < v.frame_count(), ErrorCode::kShape,
            "query " + std::to_string(q.id) + " frame outside the video");
    out.push_back({q.id, q.frame, v.to_active(q.position, q.frame)});
  }
  return out;
}

inline std::vector<Query> scaled_queries(std::span<const Query> queries, double sigma) {
  std::vector<Query> out(queries.begin(), queries.end());
  for (auto& q : out) q.position /= sigma;
  return out;
}

/// Normalized trajectory estimates for every (query, frame) of a video.
struct VideoEstimates {
  int queries = 0;
  int frames = 0;
  double sigma = 1.0;
  Matrix<double> positions;  // [Q*S, 3], normalized by sigma
  Eigen::VectorXd logits;    // [Q*S]
  std::vector<int> last_frame;  // last processed frame per query, -1 if none
};

/// Sliding-window inference over one session. Queries are in the active
/// space, unscaled. Returns normalized estimates (unscale with `sigma`).
template <typename S>
VideoEstimates run_windows(const ParamStore<S>& params, VideoSession<S>& video, std::span<const Query> queries,
                           const TrackOptions& options) {
  const TrackerModel<S>& model = *video.model;
  const int T = model.config().window, Sf = video.frame_count();
  const int iterations = options.iterations.value_or(model.config().refiner.iterations);
  const int Q = static_cast<int>(queries.size());
  require(Q > 0, ErrorCode::kEmptyWindow, "no queries to track");
  VideoEstimates est;
  est.queries = Q;
  est.frames = Sf;
  est.positions = Matrix<double>::Zero(Eigen::Index(Q) * Sf, 3);
  est.logits = Eigen::VectorXd::Zero(Eigen::Index(Q) * Sf);
  est.last_frame.assign(Q, -1);
  est.sigma = 0.0;
  if (options.scale_scope == ScaleScope::kPerVideo)
    video.set_sigma(video.compute_sigma({}, options.depth_upper_bound));

  for (int start : window_starts(Sf, T)) {
    const std::vector<int> slots = window_frames(start, T, Sf);
    if (options.scale_scope == ScaleScope::kPerWindow) video.set_sigma(video.compute_sigma(slots, options.depth_upper_bound));
    if (est.sigma != 0.0 && est.sigma != video.sigma) {
      est.positions *= est.sigma / video.sigma;
    }
    est.sigma = video.sigma;

    std::vector<int> active;
    for (int q = 0; q < Q; ++q)
      if (queries[q].frame <= slots.back()) active.push_back(q);
    if (active.empty()) continue;
    std::vector<Query> window_queries;
    for (int q : active) window_queries.push_back(queries[q]);
    window_queries = scaled_queries(window_queries, video.sigma);

    TrajectoryState state = initialize_window(window_queries, T);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int q = active[a];
      const int last = est.last_frame[q];
      if (last < 0) continue;  // new query: zero-motion init
      for (int t = 0; t < T; ++t) {
        // Frames already estimated are copied; later frames start at the last
        // known position with a fresh (zero) visibility logit, since copying a
        // confident logit across a visibility change is confidently wrong.
        const int f = std::min(start + t, last);
        const Eigen::Index src = Eigen::Index(q) * Sf + f;
        state.positions.row(state.row(a, t)) = est.positions.row(src);
        if (start + t <= last) state.logits(state.row(a, t)) = est.logits(src);
      }
    }

    WindowContext<S> ctx{slots, &video.frames, &video.features};
    const auto support = model.support_bags(window_queries, video.frames);
    state = model.refine(params, ctx, support, std::move(state), iterations);

    for (std::size_t a = 0; a < active.size(); ++a) {
      const int q = active[a];
      for (int t = 0; t < T && start + t < Sf; ++t) {
        const Eigen::Index dst = Eigen::Index(q) * Sf + start + t;
        est.positions.row(dst) = state.positions.row(state.row(a, t));
        est.logits(dst) = state.logits(state.row(a, t));
      }
      est.last_frame[q] = std::min(start + T - 1, Sf - 1);
    }
  }
  return est;
}

/// Converts normalized estimates into a TrackingResult in `out_mode`.
template <typename S>
TrackingResult assemble_result(const VideoSession<S>& video, const VideoEstimates& est, std::span<const Query> queries,
                               CoordinateSystem out_mode) {
  TrackingResult r;
  r.resize(est.queries, est.frames);
  r.system = out_mode;
  r.sigma = est.sigma;
  r.intrinsics = video.intrinsics;
  if (std::all_of(video.poses.begin(), video.poses.end(), [](const auto& p) { return p.has_value(); }))
    for (const auto& p : video.poses) r.poses.push_back(*p);
  for (int q = 0; q < est.queries; ++q) {
    for (int f = queries[q].frame; f <= est.last_frame[q]; ++f) {
      const Eigen::Index row = Eigen::Index(q) * est.frames + f;
      const Vec3 active = est.positions.row(row).transpose() * est.sigma;
      const Vec3 cam = convert_coords(active, video.mode, CoordinateSystem::kXYZCamera, video.intrinsics, video.poses[f]);
      const std::size_t i = r.index(q, f);
      if (!(cam.z() > 0.0) || !cam.allFinite()) continue;  // cannot be projected: left invalid
      const Vec3 out = convert_coords(cam, CoordinateSystem::kXYZCamera, out_mode, video.intrinsics, video.poses[f]);
      const Vec2 uv = project(cam, video.intrinsics).uv;
      for (int k = 0; k < 3; ++k) r.positions[i * 3 + k] = static_cast<float>(out(k));
      r.pixels[i * 2] = static_cast<float>(uv.x());
      r.pixels[i * 2 + 1] = static_cast<float>(uv.y());
      r.visibility[i] = est.logits(row) > 0.0 ? 1 : 0;
      r.valid[i] = 1;
    }
  }
  return r;
}

/// Forward-in-time tracking of `queries` (camera frame of their t_q).
template <typename S>
TrackingResult track_queries(const TrackerModel<S>& model, const ParamStore<S>& params, const SceneBundle& scene,
                             std::span<const Query> camera_queries, const TrackOptions& options) {
  VideoSession<S> video = open_session(model, params, scene, options.mode, false);
  const std::vector<Query> queries = active_queries(video, camera_queries);
  const VideoEstimates est = run_windows(params, video, queries, options);
  return assemble_result(video, est, queries, options.output_mode.value_or(options.mode));
}

/// Auxiliary support queries appended after the scene's own queries.
inline std::vector<Query> with_support_queries(const SceneBundle& scene, int grid_n) {
  std::vector<Query> queries = scene.query_list();
  const auto aux = add_support_grid(scene, grid_n, static_cast<int>(queries.size()));
  queries.insert(queries.end(), aux.begin(), aux.end());
  return queries;
}

inline TrackingResult keep_first_queries(const TrackingResult& r, int n) {
  if (n >= r.queries) return r;
  TrackingResult out = r;
  out.queries = n;
  out.positions.resize(std::size_t(n) * r.frames * 3);
  out.visibility.resize(std::size_t(n) * r.frames);
  out.pixels.resize(std::size_t(n) * r.frames * 2);
  out.valid.resize(std::size_t(n) * r.frames);
  return out;
}

/// Frames after t_q (and t_q itself) from the forward pass, frames before
/// t_q from a pass over the time-reversed video.
template <typename S>
TrackingResult track_video(const TrackerModel<S>& model, const ParamStore<S>& params, const SceneBundle& scene,
                           const TrackOptions& options) {
  const std::vector<Query> queries = with_support_queries(scene, options.support_grid);
  TrackingResult fwd = track_queries(model, params, scene, queries, options);
  if (options.bidirectional) {
    const SceneBundle reversed = reverse_in_time(scene);
    std::vector<Query> rq = queries;
    for (auto& q : rq) q.frame = scene.frames - 1 - q.frame;
    const TrackingResult bwd = track_queries(model, params, reversed, rq, options);
    for (int q = 0; q < fwd.queries; ++q) {
      for (int f = 0; f < queries[q].frame; ++f) {
        const std::size_t d = fwd.index(q, f), s = bwd.index(q, scene.frames - 1 - f);
        for (int k = 0; k < 3; ++k) fwd.positions[d * 3 + k] = bwd.positions[s * 3 + k];
        for (int k = 0; k < 2; ++k) fwd.pixels[d * 2 + k] = bwd.pixels[s * 2 + k];
        fwd.visibility[d] = bwd.visibility[s];
        fwd.valid[d] = bwd.valid[s];
      }
    }
  }
  if (!options.include_support) fwd = keep_first_queries(fwd, scene.query_count());
  return fwd;
}

}  // namespace tapip3d
