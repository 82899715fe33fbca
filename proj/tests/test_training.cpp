#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "tapip3d/gradcheck_suite.hpp"
#include "tapip3d/training.hpp"

namespace tapip3d {
namespace {

TEST(Training, LossHandValues) {
  Matrix<double> pos(3, 3);
  pos << 1, 2, 3, 0, 0, 2, 5, 5, 5;
  Eigen::VectorXd logits(3);
  logits << 0.0, 2.0, -1.0;
  std::vector<std::optional<LossTarget>> targets(3);
  targets[0] = LossTarget{Vec3(1, 2, 3 + 0.6), true, 2.0, true};  // |e| = 0.6, depth 2
  targets[1] = LossTarget{Vec3(3, 4, 2), false, 5.0, false};      // visibility only
  const LossValue lv = compute_loss(pos, logits, targets, 3.0);
  const double want = 0.3 + 3.0 * std::log(2.0) + 3.0 * (2.0 + std::log1p(std::exp(-2.0)));
  EXPECT_NEAR(lv.value, want, 1e-12);
  EXPECT_NEAR(lv.dpositions(0, 2), -0.5, 1e-12);
  EXPECT_EQ(lv.dpositions.row(1).norm(), 0.0);
  EXPECT_NEAR(lv.dlogits(0), 3.0 * (0.5 - 1.0), 1e-12);
  EXPECT_NEAR(lv.dlogits(1), 3.0 / (1.0 + std::exp(-2.0)), 1e-12);
  EXPECT_EQ(lv.dlogits(2), 0.0);

  targets[0]->depth = 0.0;
  try {
    compute_loss(pos, logits, targets, 3.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLoss);
  }
}

TEST(Training, CrossEntropyIsStable) {
  EXPECT_NEAR(bce_with_logit(1000.0, false), 1000.0, 1e-9);
  EXPECT_NEAR(bce_with_logit(-1000.0, true), 1000.0, 1e-9);
  EXPECT_EQ(bce_with_logit(1000.0, true), 0.0);
  EXPECT_NEAR(bce_with_logit(0.0, true), std::log(2.0), 1e-15);
}

TEST(Training, DiscountWeights) {
  EXPECT_DOUBLE_EQ(discount_weight(4, 4, 0.8), 1.0);
  EXPECT_DOUBLE_EQ(discount_weight(1, 4, 0.8), 0.8 * 0.8 * 0.8);
  EXPECT_NEAR(discounted_loss({1.0, 2.0, 3.0, 4.0}, 0.8, 0.5), 0.5 * (0.512 + 1.28 + 2.4 + 4.0), 1e-12);
  EXPECT_THROW(discounted_loss({}, 0.8, 1.0), Error);
}

// Scalar AdamW written out step by step, with global clipping.
TEST(Training, AdamWMatchesScalarOracle) {
  ParamStore<double> p;
  p.declare("a", {2});
  p.declare("b", {1});
  p.mutable_value("a") << 1.0, -2.0;
  p.mutable_value("b") << 0.5;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  cfg.max_grad_norm = 1.0;
  AdamW<double> opt(cfg);
  std::vector<double> w{1.0, -2.0, 0.5}, m(3, 0.0), v(3, 0.0);
  const std::vector<std::vector<double>> grads{{3.0, 0.0, 4.0}, {0.1, -0.2, 0.05}, {-0.3, 0.4, 0.0}};
  for (int step = 1; step <= 3; ++step) {
    const auto& g = grads[step - 1];
    p.grad("a") << g[0], g[1];
    p.grad("b") << g[2];
    const double norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    const double clip = norm > 1.0 ? 1.0 / norm : 1.0;
    EXPECT_NEAR(opt.step(p), norm, 1e-12);
    for (int i = 0; i < 3; ++i) {
      const double gi = g[i] * clip;
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      w[i] -= 0.1 * 0.01 * w[i];
      w[i] -= 0.1 * (m[i] / (1 - std::pow(0.9, step))) / (std::sqrt(v[i] / (1 - std::pow(0.999, step))) + 1e-8);
    }
    EXPECT_NEAR(p.value("a")(0, 0), w[0], 1e-12);
    EXPECT_NEAR(p.value("a")(0, 1), w[1], 1e-12);
    EXPECT_NEAR(p.value("b")(0, 0), w[2], 1e-12);
  }
  EXPECT_EQ(opt.steps(), 3);
}

struct Fixture {
  TrackerModel<double> model{ModelConfig::tiny()};
  ParamStore<double> params;
  SceneBundle scene;
  Fixture() : params(model.init_params(1)) {
    Rng rng(2);
    gradcheck::randomize(params, rng, 0.1);
    SceneSpec spec = gradcheck::tiny_scene_spec(3);
    spec.queries = 3;
    spec.query_frame_max = 2;
    scene = generate(spec).bundle;
  }
};

TEST(Training, EagerAndBatchEndBackpropAgree) {
  Fixture f;
  TrainConfig cfg;
  cfg.loss.iterations = 2;
  ParamStore<double> a = f.params, b = f.params;
  a.zero_grad();
  b.zero_grad();
  const auto ea = train_step(f.model, a, f.scene, cfg, true);
  cfg.schedule = BackpropSchedule::kBatchEnd;
  const auto eb = train_step(f.model, b, f.scene, cfg, true);
  EXPECT_EQ(ea.loss, eb.loss);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const auto& ga = a.entries()[i].grad.data();
    const auto& gb = b.entries()[i].grad.data();
    for (std::size_t k = 0; k < ga.size(); ++k) worst = std::max(worst, std::abs(ga[k] - gb[k]));
  }
  EXPECT_LT(worst, 1e-12);
  EXPECT_GT(a.grad_norm(), 0.0);
}

TEST(Training, TargetsStartAtTheQueryFrame) {
  Fixture f;
  VideoSession<double> video = open_session(f.model, f.params, f.scene, CoordinateSystem::kXYZCamera, false);
  const auto queries = active_queries(video, f.scene.query_list());
  std::vector<int> active{0, 1, 2};
  const auto targets = window_targets(video, f.scene, queries, active, 0, 4, LossConfig{});
  for (int a = 0; a < 3; ++a)
    for (int t = 0; t < 4; ++t) EXPECT_EQ(targets[a * 4 + t].has_value(), t >= queries[a].frame) << a << " " << t;
  LossConfig visible_only;
  visible_only.supervise_occluded = false;
  for (const auto& t : window_targets(video, f.scene, queries, active, 0, 4, visible_only))
    if (t) {
      EXPECT_EQ(t->supervise_position, t->visible);
    }
}

TEST(Training, DeterministicAndDecreasing) {
  Fixture f;
  TrainConfig cfg;
  cfg.optimizer.lr = 3e-3;
  cfg.loss.iterations = 2;
  ParamStore<double> a = f.params, b = f.params;
  const auto ra = train_toy(f.model, a, {f.scene}, 6, cfg, 4);
  const auto rb = train_toy(f.model, b, {f.scene}, 6, cfg, 4);
  EXPECT_EQ(ra.losses, rb.losses);
  EXPECT_EQ(ra.completed_steps, 6);
  EXPECT_LT(ra.losses.back(), ra.losses.front());
}

TEST(Training, ZeroStepsLeavesParametersAlone) {
  Fixture f;
  ParamStore<double> p = f.params;
  const auto r = train_toy(f.model, p, {f.scene}, 0, TrainConfig{}, 0);
  EXPECT_EQ(r.completed_steps, 0);
  EXPECT_TRUE(r.losses.empty());
  for (std::size_t i = 0; i < p.entries().size(); ++i) EXPECT_TRUE(std::ranges::equal(p.entries()[i].value.data(), f.params.entries()[i].value.data()));
  EXPECT_THROW(train_toy(f.model, p, {f.scene}, -1, TrainConfig{}, 0), Error);
  EXPECT_THROW(train_toy(f.model, p, {}, 1, TrainConfig{}, 0), Error);
}

TEST(Training, DivergenceNamesTheStep) {
  Fixture f;
  TrainConfig cfg;
  cfg.loss.iterations = 1;
  cfg.lr_schedule = [](int) { return std::numeric_limits<double>::quiet_NaN(); };
  try {
    train_toy(f.model, f.params, {f.scene}, 3, cfg, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDivergence);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Training, ToyScheduleDecaysGeometrically) {
  const TrainConfig cfg = toy_train_config(400, 1e-3);
  EXPECT_EQ(cfg.scale_scope, ScaleScope::kPerVideo);
  EXPECT_DOUBLE_EQ(cfg.lr_schedule(0), 1e-3);
  EXPECT_NEAR(cfg.lr_schedule(200), 1e-4, 1e-15);
  EXPECT_NEAR(cfg.lr_schedule(400), 1e-5, 1e-16);
  EXPECT_THROW(toy_train_config(0), Error);
}

TEST(Training, AugmentationIdentityAndRigidConsistency) {
  Fixture f;
  const SceneBundle same = augment_sample(f.scene, AugmentConfig{}, 5);
  EXPECT_EQ(same.rgb, f.scene.rgb);
  EXPECT_EQ(same.pointmap, f.scene.pointmap);
  AugmentConfig cfg;
  cfg.blur_sigma = 1.0;
  cfg.color_jitter = 0.2;
  cfg.occlusion_prob = 0.5;
  cfg.rigid = RigidSequenceConfig{5.0, 0.1, 3};
  const SceneBundle moved = augment_sample(f.scene, cfg, 5);
  EXPECT_EQ(moved.valid, f.scene.valid);
  EXPECT_NE(moved.rgb, f.scene.rgb);
  for (const auto& q : moved.query_list())
    EXPECT_LT((q.position - moved.gt_position(q.id, q.frame)).norm(), 1e-5);
  EXPECT_EQ(augment_sample(f.scene, cfg, 5).pointmap, moved.pointmap);
}

TEST(Training, FullLossGradCheck) {
  const auto r = grad_check(gradcheck::training_loss_case(21, BackpropSchedule::kEager), gradcheck::kEpsilon,
                            gradcheck::kTolerance, gradcheck::kFloor);
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_location;
}

}  // namespace
}  // namespace tapip3d
