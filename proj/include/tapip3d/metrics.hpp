#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/pipeline.hpp"
#include "tapip3d/scene.hpp"

namespace tapip3d {

struct MetricConfig {
  std::vector<double> fractions{0.01, 0.02, 0.04, 0.08, 0.16};
  std::vector<double> pixel_thresholds{1.0, 2.0, 4.0, 8.0, 16.0};
  double resolution = 256.0;  // 2D errors are measured after resizing to this square
  bool exclude_query_frame = false;
};

/// Flat per-(query, frame) evaluation arrays. Predictions are camera-frame;
/// frames the prediction does not cover count as predicted occluded with no
/// position match.
struct EvalPair {
  int queries = 0;
  int frames = 0;
  int width = 0;
  int height = 0;
  std::vector<Vec3> pred;        // camera frame
  std::vector<Vec2> pred_pixel;
  std::vector<std::uint8_t> pred_visible;
  std::vector<std::uint8_t> pred_valid;
  std::vector<Vec3> gt;          // camera frame
  std::vector<std::uint8_t> gt_visible;
  std::vector<std::uint8_t> gt_valid;
  std::vector<int> query_frames;

  std::size_t index(int q, int s) const { return std::size_t(q) * frames + s; }

  void resize(int q, int s) {
    queries = q;
    frames = s;
    const std::size_t n = std::size_t(q) * s;
    pred.assign(n, Vec3::Zero());
    pred_pixel.assign(n, Vec2::Zero());
    pred_visible.assign(n, 0);
    pred_valid.assign(n, 0);
    gt.assign(n, Vec3::Zero());
    gt_visible.assign(n, 0);
    gt_valid.assign(n, 0);
    query_frames.assign(q, 0);
  }
};

struct ThresholdScore {
  double threshold = 0.0;
  double within = 0.0;   // percent of GT-visible points within the threshold
  double jaccard = 0.0;  // percent
};

struct MetricReport {
  double aj_3d = 0.0;
  double apd_3d = 0.0;
  double oa = 0.0;
  double aj_2d = 0.0;
  double apd_2d = 0.0;
  std::vector<ThresholdScore> per_fraction_3d;
  std::vector<ThresholdScore> per_threshold_2d;
  long evaluated_points = 0;
  long visible_points = 0;
};

/// Builds the evaluation arrays from a tracking result and the scene's GT.
inline EvalPair make_eval_pair(const TrackingResult& pred, const SceneBundle& scene) {
  require(scene.ground_truth.has_value(), ErrorCode::kShape, "scene has no ground-truth tracks");
  const auto& gt = *scene.ground_truth;
  require(pred.queries == gt.queries && pred.frames == scene.frames, ErrorCode::kShape,
          "prediction [" + std::to_string(pred.queries) + ", " + std::to_string(pred.frames) +
              "] does not match ground truth [" + std::to_string(gt.queries) + ", " + std::to_string(scene.frames) + "]");
  EvalPair e;
  e.resize(pred.queries, pred.frames);
  e.width = scene.width;
  e.height = scene.height;
  for (int q = 0; q < pred.queries; ++q) {
    e.query_frames[q] = static_cast<int>(scene.queries[std::size_t(q) * 4]);
    for (int s = 0; s < pred.frames; ++s) {
      const std::size_t i = e.index(q, s);
      e.gt[i] = scene.gt_position(q, s);
      e.gt_visible[i] = gt.visible[i];
      e.gt_valid[i] = gt.valid[i] && is_valid_depth(e.gt[i].z());
      if (!pred.valid[i]) continue;
      e.pred[i] = convert_coords(pred.position(q, s), pred.system, CoordinateSystem::kXYZCamera, scene.intrinsics,
                                 scene.pose(s));
      e.pred_pixel[i] = pred.pixel(q, s);
      e.pred_visible[i] = pred.visibility[i];
      e.pred_valid[i] = 1;
    }
  }
  return e;
}

namespace detail {

struct Counts {
  long tp = 0, fn = 0, fp = 0, within_visible = 0, visible = 0;
};

template <typename Within>
Counts count(const EvalPair& e, const MetricConfig& cfg, Within within) {
  Counts c;
  for (int q = 0; q < e.queries; ++q) {
    for (int s = 0; s < e.frames; ++s) {
      const std::size_t i = e.index(q, s);
      if (!e.gt_valid[i]) continue;
      if (cfg.exclude_query_frame && s == e.query_frames[q]) continue;
      const bool gv = e.gt_visible[i] != 0;
      const bool pv = e.pred_valid[i] && e.pred_visible[i];
      const bool close = e.pred_valid[i] && within(i);
      if (gv) {
        ++c.visible;
        if (close) ++c.within_visible;
      }
      if (pv && gv && close) {
        ++c.tp;
      } else {
        if (gv) ++c.fn;
        if (pv) ++c.fp;
      }
    }
  }
  return c;
}

inline double percent(long num, long den) { return den > 0 ? 100.0 * double(num) / double(den) : 0.0; }

}  // namespace detail

/// Percent within each depth-scaled threshold, and the Jaccard breakdown.
inline std::vector<ThresholdScore> scores_3d(const EvalPair& e, const MetricConfig& cfg) {
  std::vector<ThresholdScore> out;
  for (double frac : cfg.fractions) {
    const auto c = detail::count(e, cfg, [&](std::size_t i) { return (e.pred[i] - e.gt[i]).norm() < frac * e.gt[i].z(); });
    require(c.visible > 0, ErrorCode::kUndefinedMetric, "no ground-truth-visible points to evaluate");
    out.push_back({frac, detail::percent(c.within_visible, c.visible), detail::percent(c.tp, c.tp + c.fn + c.fp)});
  }
  return out;
}

inline std::vector<ThresholdScore> scores_2d(const EvalPair& e, const MetricConfig& cfg,
                                             const CameraIntrinsics& intr) {
  const double sx = cfg.resolution / e.width, sy = cfg.resolution / e.height;
  std::vector<Vec2> gt_px(e.gt.size(), Vec2::Zero());
  for (std::size_t i = 0; i < e.gt.size(); ++i)
    if (e.gt_valid[i]) gt_px[i] = project(e.gt[i], intr).uv;
  std::vector<ThresholdScore> out;
  for (double thr : cfg.pixel_thresholds) {
    const auto c = detail::count(e, cfg, [&](std::size_t i) {
      const double du = (e.pred_pixel[i].x() - gt_px[i].x()) * sx, dv = (e.pred_pixel[i].y() - gt_px[i].y()) * sy;
      return du * du + dv * dv < thr * thr;
    });
    require(c.visible > 0, ErrorCode::kUndefinedMetric, "no ground-truth-visible points to evaluate");
    out.push_back({thr, detail::percent(c.within_visible, c.visible), detail::percent(c.tp, c.tp + c.fn + c.fp)});
  }
  return out;
}

inline double mean_within(const std::vector<ThresholdScore>& s) {
  double acc = 0.0;
  for (const auto& x : s) acc += x.within;
  return s.empty() ? 0.0 : acc / double(s.size());
}
inline double mean_jaccard(const std::vector<ThresholdScore>& s) {
  double acc = 0.0;
  for (const auto& x : s) acc += x.jaccard;
  return s.empty() ? 0.0 : acc / double(s.size());
}

inline double apd_3d(const EvalPair& e, const MetricConfig& cfg = {}) { return mean_within(scores_3d(e, cfg)); }
inline double average_jaccard_3d(const EvalPair& e, const MetricConfig& cfg = {}) {
  return mean_jaccard(scores_3d(e, cfg));
}

inline double occlusion_accuracy(const EvalPair& e, const MetricConfig& cfg = {}) {
  long agree = 0, total = 0;
  for (int q = 0; q < e.queries; ++q) {
    for (int s = 0; s < e.frames; ++s) {
      const std::size_t i = e.index(q, s);
      if (!e.gt_valid[i]) continue;
      if (cfg.exclude_query_frame && s == e.query_frames[q]) continue;
      const bool pv = e.pred_valid[i] && e.pred_visible[i];
      ++total;
      if (pv == (e.gt_visible[i] != 0)) ++agree;
    }
  }
  require(total > 0, ErrorCode::kUndefinedMetric, "no valid points to evaluate");
  return detail::percent(agree, total);
}

inline MetricReport evaluate(const EvalPair& e, const CameraIntrinsics& intr, const MetricConfig& cfg = {}) {
  MetricReport r;
  r.per_fraction_3d = scores_3d(e, cfg);
  r.per_threshold_2d = scores_2d(e, cfg, intr);
  r.apd_3d = mean_within(r.per_fraction_3d);
  r.aj_3d = mean_jaccard(r.per_fraction_3d);
  r.apd_2d = mean_within(r.per_threshold_2d);
  r.aj_2d = mean_jaccard(r.per_threshold_2d);
  r.oa = occlusion_accuracy(e, cfg);
  for (std::size_t i = 0; i < e.gt.size(); ++i) {
    if (!e.gt_valid[i]) continue;
    if (cfg.exclude_query_frame && int(i % e.frames) == e.query_frames[i / e.frames]) continue;
    ++r.evaluated_points;
    if (e.gt_visible[i]) ++r.visible_points;
  }
  return r;
}

}  // namespace tapip3d
