#include <gtest/gtest.h>

#include <random>

#include "tapip3d/metrics.hpp"

namespace tapip3d {
namespace {

const CameraIntrinsics kIntr{50.0, 40.0, 32.0, 24.0, 64, 48};

EvalPair random_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> qd(1, 5), sd(1, 7);
  std::uniform_real_distribution<double> u(-1.0, 1.0), z(1.0, 5.0), err(0.0, 0.2), pix(0.0, 10.0);
  std::bernoulli_distribution coin(0.5), mostly(0.85);
  EvalPair e;
  e.resize(qd(rng), sd(rng));
  e.width = kIntr.width;
  e.height = kIntr.height;
  for (int q = 0; q < e.queries; ++q) {
    e.query_frames[q] = std::uniform_int_distribution<int>(0, e.frames - 1)(rng);
    for (int s = 0; s < e.frames; ++s) {
      const std::size_t i = e.index(q, s);
      e.gt[i] = Vec3(u(rng), u(rng), z(rng));
      e.gt_valid[i] = mostly(rng);
      e.gt_visible[i] = coin(rng);
      e.pred_valid[i] = mostly(rng);
      e.pred_visible[i] = coin(rng);
      const Vec3 dir = Vec3(u(rng), u(rng), u(rng)).normalized();
      e.pred[i] = e.gt[i] + dir * err(rng) * e.gt[i].z();
      const Vec2 uv = project(e.gt[i], kIntr).uv;
      const double a = u(rng) * M_PI;
      e.pred_pixel[i] = uv + Vec2(std::cos(a), std::sin(a)) * pix(rng);
    }
  }
  // Guarantee at least one evaluable visible point.
  e.gt_valid[0] = 1;
  e.gt_visible[0] = 1;
  if (e.query_frames[0] == 0) e.query_frames[0] = e.frames > 1 ? 1 : 0;
  return e;
}

struct Oracle {
  double apd3 = 0, aj3 = 0, apd2 = 0, aj2 = 0, oa = 0;
};

// Per-point loops written from the metric definitions.
Oracle oracle(const EvalPair& e, bool exclude_query) {
  Oracle o;
  const double fr[5] = {0.01, 0.02, 0.04, 0.08, 0.16};
  const double px[5] = {1, 2, 4, 8, 16};
  for (int k = 0; k < 5; ++k) {
    double vis3 = 0, in3 = 0, tp3 = 0, fn3 = 0, fp3 = 0;
    double vis2 = 0, in2 = 0, tp2 = 0, fn2 = 0, fp2 = 0;
    for (int q = 0; q < e.queries; ++q)
      for (int s = 0; s < e.frames; ++s) {
        const std::size_t i = e.index(q, s);
        if (!e.gt_valid[i] || (exclude_query && s == e.query_frames[q])) continue;
        const bool gv = e.gt_visible[i], pv = e.pred_valid[i] && e.pred_visible[i];
        const double d3 = std::sqrt(std::pow(e.pred[i].x() - e.gt[i].x(), 2) + std::pow(e.pred[i].y() - e.gt[i].y(), 2) +
                                    std::pow(e.pred[i].z() - e.gt[i].z(), 2));
        const bool c3 = e.pred_valid[i] && d3 < fr[k] * e.gt[i].z();
        const double gu = kIntr.fx * e.gt[i].x() / e.gt[i].z() + kIntr.cx, gvv = kIntr.fy * e.gt[i].y() / e.gt[i].z() + kIntr.cy;
        const double du = (e.pred_pixel[i].x() - gu) * 256.0 / 64.0, dv = (e.pred_pixel[i].y() - gvv) * 256.0 / 48.0;
        const bool c2 = e.pred_valid[i] && std::sqrt(du * du + dv * dv) < px[k];
        if (gv) {
          vis3 += 1;
          vis2 += 1;
          in3 += c3;
          in2 += c2;
        }
        tp3 += gv && pv && c3;
        fn3 += gv && !(pv && c3);
        fp3 += pv && !(gv && c3);
        tp2 += gv && pv && c2;
        fn2 += gv && !(pv && c2);
        fp2 += pv && !(gv && c2);
      }
    o.apd3 += 100 * in3 / vis3 / 5;
    o.apd2 += 100 * in2 / vis2 / 5;
    o.aj3 += (tp3 + fn3 + fp3 > 0 ? 100 * tp3 / (tp3 + fn3 + fp3) : 0) / 5;
    o.aj2 += (tp2 + fn2 + fp2 > 0 ? 100 * tp2 / (tp2 + fn2 + fp2) : 0) / 5;
  }
  double agree = 0, total = 0;
  for (int q = 0; q < e.queries; ++q)
    for (int s = 0; s < e.frames; ++s) {
      const std::size_t i = e.index(q, s);
      if (!e.gt_valid[i] || (exclude_query && s == e.query_frames[q])) continue;
      total += 1;
      agree += (e.pred_valid[i] && e.pred_visible[i]) == bool(e.gt_visible[i]);
    }
  o.oa = 100 * agree / total;
  return o;
}

TEST(Metrics, MatchScalarOracleOnFuzzedInstances) {
  std::mt19937_64 rng(2024);
  for (int n = 0; n < 1000; ++n) {
    const EvalPair e = random_pair(rng);
    const bool exclude = n % 3 == 0 && e.frames > 1;
    MetricConfig cfg;
    cfg.exclude_query_frame = exclude;
    const MetricReport r = evaluate(e, kIntr, cfg);
    const Oracle o = oracle(e, exclude);
    ASSERT_NEAR(r.apd_3d, o.apd3, 1e-9) << "instance " << n;
    ASSERT_NEAR(r.aj_3d, o.aj3, 1e-9) << "instance " << n;
    ASSERT_NEAR(r.apd_2d, o.apd2, 1e-9) << "instance " << n;
    ASSERT_NEAR(r.aj_2d, o.aj2, 1e-9) << "instance " << n;
    ASSERT_NEAR(r.oa, o.oa, 1e-9) << "instance " << n;
  }
}

EvalPair uniform_error_pair(double fraction) {
  EvalPair e;
  e.resize(2, 3);
  e.width = kIntr.width;
  e.height = kIntr.height;
  for (std::size_t i = 0; i < 6; ++i) {
    e.gt[i] = Vec3(0.1 * i, -0.2, 2.0 + i);
    e.pred[i] = e.gt[i] + Vec3(0, fraction * e.gt[i].z(), 0);
    e.gt_valid[i] = e.gt_visible[i] = e.pred_valid[i] = e.pred_visible[i] = 1;
    e.pred_pixel[i] = project(e.gt[i], kIntr).uv;
  }
  return e;
}

TEST(Metrics, HandCases) {
  const EvalPair e = uniform_error_pair(0.03);
  const auto s = scores_3d(e, MetricConfig{});
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[0].within, 0.0);
  EXPECT_EQ(s[2].within, 100.0);
  EXPECT_DOUBLE_EQ(apd_3d(e), 60.0);
  EXPECT_DOUBLE_EQ(average_jaccard_3d(e), 60.0);
  EXPECT_DOUBLE_EQ(occlusion_accuracy(e), 100.0);
  EXPECT_DOUBLE_EQ(apd_3d(uniform_error_pair(0.0)), 100.0);
  EXPECT_DOUBLE_EQ(apd_3d(uniform_error_pair(0.5)), 0.0);

  // Predicting every point occluded: zero Jaccard, APD unaffected.
  EvalPair occluded = e;
  std::fill(occluded.pred_visible.begin(), occluded.pred_visible.end(), 0);
  EXPECT_DOUBLE_EQ(apd_3d(occluded), 60.0);
  EXPECT_DOUBLE_EQ(average_jaccard_3d(occluded), 0.0);
  EXPECT_DOUBLE_EQ(occlusion_accuracy(occluded), 0.0);
}

TEST(Metrics, UndefinedWithoutVisiblePoints) {
  EvalPair e = uniform_error_pair(0.0);
  std::fill(e.gt_visible.begin(), e.gt_visible.end(), 0);
  try {
    apd_3d(e);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kUndefinedMetric);
  }
  std::fill(e.gt_valid.begin(), e.gt_valid.end(), 0);
  EXPECT_THROW(occlusion_accuracy(e), Error);
}

TEST(Metrics, EvalPairFromResult) {
  SceneBundle scene;
  scene.frames = 2;
  scene.width = kIntr.width;
  scene.height = kIntr.height;
  scene.intrinsics = kIntr;
  scene.queries = {0, 0, 0, 2};
  scene.ground_truth = GroundTruth{1, {0, 0, 2, 0.1f, 0, 2}, {1, 1}, {1, 1}};
  scene.poses = std::vector<RigidTransform>{RigidTransform{}, RigidTransform::from_axis_angle(Vec3(0, 0.1, 0), Vec3(1, 0, 0))};
  TrackingResult r;
  r.resize(1, 2);
  r.system = CoordinateSystem::kXYZWorld;
  const Vec3 w = scene.pose(1)->apply(Vec3(0.1, 0, 2));
  for (int k = 0; k < 3; ++k) r.positions[3 + k] = static_cast<float>(w(k));
  r.valid = {0, 1};
  r.visibility = {0, 1};
  const EvalPair e = make_eval_pair(r, scene);
  EXPECT_EQ(e.pred_valid, (std::vector<std::uint8_t>{0, 1}));
  EXPECT_LT((e.pred[1] - Vec3(0.1, 0, 2)).norm(), 1e-6);
  r.resize(2, 2);
  EXPECT_THROW(make_eval_pair(r, scene), Error);
}

}  // namespace
}  // namespace tapip3d
