#include <gtest/gtest.h>

#include "tapip3d/gradcheck_suite.hpp"
#include "tapip3d/pipeline.hpp"
#include "tapip3d/synthetic.hpp"

namespace tapip3d {
namespace {

SceneBundle small_scene(int frames, std::uint64_t seed, int query_frame_max = 0) {
  SceneSpec spec = gradcheck::tiny_scene_spec(seed);
  spec.frames = frames;
  spec.queries = 4;
  spec.query_frame_max = query_frame_max;
  return generate(spec).bundle;
}

struct TinyModel {
  TrackerModel<double> model{ModelConfig::tiny()};
  ParamStore<double> params;
  explicit TinyModel(std::uint64_t seed) : params(model.init_params(seed)) {
    Rng rng(seed + 100);
    gradcheck::randomize(params, rng, 0.1);
  }
};

TEST(Pipeline, WindowSchedule) {
  EXPECT_EQ(window_starts(24, 16), (std::vector<int>{0, 8}));
  EXPECT_EQ(window_starts(16, 16), (std::vector<int>{0}));
  EXPECT_EQ(window_starts(40, 16), (std::vector<int>{0, 8, 16, 24}));
  EXPECT_EQ(window_starts(3, 16), (std::vector<int>{0}));
  EXPECT_EQ(window_frames(2, 4, 4), (std::vector<int>{2, 3, 3, 3}));
  EXPECT_THROW(window_starts(10, 1), Error);
}

// One window spanning the video is a single call to the iterative refiner.
TEST(Pipeline, SingleWindowEqualsIterativeRefine) {
  const TinyModel m(1);
  const SceneBundle scene = small_scene(4, 2);
  TrackOptions opt;
  opt.iterations = 2;
  VideoSession<double> video = open_session(m.model, m.params, scene, CoordinateSystem::kXYZCamera, false);
  const auto queries = active_queries(video, scene.query_list());
  const VideoEstimates est = run_windows(m.params, video, queries, opt);

  VideoSession<double> ref = open_session(m.model, m.params, scene, CoordinateSystem::kXYZCamera, false);
  ref.set_sigma(ref.compute_sigma({}, std::nullopt));
  const auto wq = scaled_queries(queries, ref.sigma);
  const WindowContext<double> ctx{window_frames(0, 4, 4), &ref.frames, &ref.features};
  const TrajectoryState s = m.model.refine(m.params, ctx, m.model.support_bags(wq, ref.frames), initialize_window(wq, 4), 2);
  EXPECT_EQ(est.sigma, ref.sigma);
  EXPECT_TRUE((est.positions.array() == s.positions.array()).all());
  EXPECT_TRUE((est.logits.array() == s.logits.array()).all());
  EXPECT_GT((s.positions - initialize_window(wq, 4).positions).cwiseAbs().maxCoeff(), 1e-6);
}

// Second window: slots before the overlap end copy the first window's
// estimates, later slots repeat its last frame.
TEST(Pipeline, WindowHandOffGolden) {
  const TinyModel m(3);
  const SceneBundle scene = small_scene(6, 4);
  TrackOptions opt;
  opt.iterations = 1;
  VideoSession<double> video = open_session(m.model, m.params, scene, CoordinateSystem::kXYZCamera, false);
  const auto queries = active_queries(video, scene.query_list());
  const VideoEstimates est = run_windows(m.params, video, queries, opt);

  video.set_sigma(video.compute_sigma({}, std::nullopt));
  const auto wq = scaled_queries(queries, video.sigma);
  const auto support = m.model.support_bags(wq, video.frames);
  const TrajectoryState w0 = m.model.refine(m.params, WindowContext<double>{window_frames(0, 4, 6), &video.frames, &video.features},
                                            support, initialize_window(wq, 4), 1);
  TrajectoryState init = initialize_window(wq, 4);
  const int from[4] = {2, 3, 3, 3};  // window-0 slot feeding each window-1 slot
  for (Eigen::Index q = 0; q < init.queries; ++q)
    for (int t = 0; t < 4; ++t) {
      init.positions.row(init.row(q, t)) = w0.positions.row(w0.row(q, from[t]));
      // Logits carry over only for frames window 0 covered (frames 2 and 3).
      init.logits(init.row(q, t)) = t < 2 ? w0.logits(w0.row(q, from[t])) : 0.0;
    }
  const TrajectoryState w1 = m.model.refine(m.params, WindowContext<double>{window_frames(2, 4, 6), &video.frames, &video.features},
                                            support, init, 1);
  for (Eigen::Index q = 0; q < init.queries; ++q) {
    EXPECT_EQ(est.last_frame[q], 5);
    for (int f = 0; f < 6; ++f) {
      const Eigen::RowVector3d want = f < 2 ? w0.positions.row(w0.row(q, f)) : w1.positions.row(w1.row(q, f - 2));
      EXPECT_EQ(est.positions.row(q * 6 + f), want) << "query " << q << " frame " << f;
      EXPECT_EQ(est.logits(q * 6 + f), f < 2 ? w0.logits(w0.row(q, f)) : w1.logits(w1.row(q, f - 2)));
    }
  }
}

TEST(Pipeline, OutputScalesWithTheScene) {
  const TinyModel m(5);
  SceneBundle scene = small_scene(6, 6);
  TrackOptions opt;
  const TrackingResult a = track_video(m.model, m.params, scene, opt);
  for (auto& v : scene.pointmap) v *= 2.0f;
  for (int q = 0; q < scene.query_count(); ++q)
    for (int k = 1; k < 4; ++k) scene.queries[std::size_t(q) * 4 + k] *= 2.0f;
  const TrackingResult b = track_video(m.model, m.params, scene, opt);
  EXPECT_NEAR(b.sigma, 2 * a.sigma, 1e-12 * a.sigma);
  ASSERT_EQ(a.valid, b.valid);
  for (std::size_t i = 0; i < a.positions.size(); ++i) EXPECT_NEAR(b.positions[i], 2 * a.positions[i], 1e-5);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) EXPECT_NEAR(b.pixels[i], a.pixels[i], 1e-3);
}

TEST(Pipeline, WorldOutputConvertsBackToCamera) {
  const TinyModel m(7);
  const SceneBundle scene = small_scene(6, 8);
  TrackOptions opt;
  const TrackingResult cam = track_video(m.model, m.params, scene, opt);
  opt.output_mode = CoordinateSystem::kXYZWorld;
  const TrackingResult world = track_video(m.model, m.params, scene, opt);
  ASSERT_EQ(world.poses.size(), 6u);
  for (int q = 0; q < cam.queries; ++q)
    for (int f = 0; f < cam.frames; ++f) {
      if (!cam.valid[cam.index(q, f)]) continue;
      const Vec3 back = to_camera(world.position(q, f), world.poses[f]);
      EXPECT_LT((back - cam.position(q, f)).norm(), 1e-5);
    }
}

TEST(Pipeline, WorldModeNeedsPoses) {
  const TinyModel m(9);
  SceneBundle scene = small_scene(4, 10);
  scene.poses.reset();
  TrackOptions opt;
  opt.mode = CoordinateSystem::kXYZWorld;
  try {
    track_video(m.model, m.params, scene, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
  EXPECT_TRUE(track_video(m.model, m.params, scene, TrackOptions{}).poses.empty());
}

// A static surface seen by a moving camera lands on the same world points in
// every frame.
TEST(Pipeline, WorldFrameStabilizesStaticScenes) {
  SceneSpec spec;
  spec.frames = 8;
  spec.background = false;
  spec.camera_linear = Vec3(0.03, 0.01, 0.0);
  spec.camera_angular = Vec3(0.0, 0.01, 0.005);
  BodySpec plane;
  plane.shape = BodyShape::kPlane;
  plane.extent = Vec3(4.0, 3.0, 0.0);
  plane.center = Vec3(0.0, 0.0, 4.0);
  plane.points = 20000;
  spec.body_list = {plane};
  spec.queries = 8;
  const SceneBundle scene = generate(spec).bundle;
  for (int f = 0; f < scene.frames; ++f) {
    const PointMap pm = scene.point_map(f, CoordinateSystem::kXYZWorld);
    for (std::size_t i = 0; i < pm.coords.size(); ++i)
      if (pm.valid[i]) {
        EXPECT_NEAR(pm.coords[i].z(), 4.0, 1e-6);
      }
  }
  for (int q = 0; q < scene.query_count(); ++q) {
    const Vec3 w0 = scene.pose(0)->apply(scene.gt_position(q, 0));
    for (int f = 1; f < scene.frames; ++f)
      EXPECT_LT((scene.pose(f)->apply(scene.gt_position(q, f)) - w0).norm(), 1e-5);
  }
}

TEST(Pipeline, BidirectionalFillsFramesBeforeTheQuery) {
  const TinyModel m(11);
  const SceneBundle scene = small_scene(6, 12, 4);
  const auto queries = scene.query_list();
  ASSERT_TRUE(std::any_of(queries.begin(), queries.end(), [](const Query& q) { return q.frame > 0; }));
  TrackOptions opt;
  const TrackingResult fwd = track_video(m.model, m.params, scene, opt);
  opt.bidirectional = true;
  const TrackingResult both = track_video(m.model, m.params, scene, opt);
  std::vector<Query> rq = queries;
  for (auto& q : rq) q.frame = scene.frames - 1 - q.frame;
  const TrackingResult bwd = track_queries(m.model, m.params, reverse_in_time(scene), rq, TrackOptions{});
  for (const auto& q : queries) {
    for (int f = 0; f < scene.frames; ++f) {
      const std::size_t i = fwd.index(q.id, f);
      if (f >= q.frame) {
        EXPECT_EQ(both.position(q.id, f), fwd.position(q.id, f));
        continue;
      }
      EXPECT_EQ(fwd.valid[i], 0);
      const std::size_t j = bwd.index(q.id, scene.frames - 1 - f);
      EXPECT_EQ(both.valid[i], bwd.valid[j]);
      EXPECT_EQ(both.position(q.id, f), bwd.position(q.id, scene.frames - 1 - f));
    }
  }
}

TEST(Pipeline, SupportGridQueriesAreDropped) {
  const TinyModel m(13);
  const SceneBundle scene = small_scene(4, 14);
  TrackOptions opt;
  opt.support_grid = 3;
  EXPECT_EQ(track_video(m.model, m.params, scene, opt).queries, scene.query_count());
  opt.include_support = true;
  const auto all = track_video(m.model, m.params, scene, opt);
  EXPECT_GT(all.queries, scene.query_count());
  EXPECT_LE(all.queries, scene.query_count() + 9);
}

}  // namespace
}  // namespace tapip3d
