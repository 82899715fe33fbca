#include <gtest/gtest.h>

#include <cmath>

#include "tapip3d/gradcheck_suite.hpp"
#include "tapip3d/refiner.hpp"
#include "tapip3d/trajectory.hpp"

namespace tapip3d {
namespace {

TEST(Trajectory, InitializationCopiesQueryPositions) {
  const std::vector<Query> qs{{0, 2, Vec3(1, 2, 3)}, {1, 0, Vec3(-1, 0, 4)}};
  const auto s = initialize_window(qs, 5);
  EXPECT_EQ(s.positions.rows(), 10);
  for (int t = 0; t < 5; ++t) {
    EXPECT_EQ(s.position(0, t), Vec3(1, 2, 3));
    EXPECT_EQ(s.position(1, t), Vec3(-1, 0, 4));
  }
  EXPECT_TRUE((s.logits.array() == 0).all());
  try {
    initialize_window(std::vector<Query>{}, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyWindow);
  }
}

TEST(Trajectory, TokenLayoutWidths) {
  const TokenLayout l{10, 2};
  EXPECT_EQ(l.motion_width(), 12);
  EXPECT_EQ(l.pixel_width(), 8);
  EXPECT_EQ(l.time_width(), 4);
  EXPECT_EQ(l.logit_offset(), 10 + 12 + 12 + 8);
  EXPECT_EQ(l.width(), 47);
}

TEST(Trajectory, TokensMatchHandAssembly) {
  TrajectoryState s = initialize_window(std::vector<Query>{{0, 0, Vec3(0.1, 0.2, 2.0)}}, 3);
  s.positions.row(1) << 0.3, 0.2, 2.0;
  s.positions.row(2) << 0.3, 0.5, 1.5;
  s.logits << 0.5, -1.0, 2.0;
  const TokenLayout l{2, 2};
  Matrix<double> nb(3, 2);
  nb << 1, 2, 3, 4, 5, 6;
  const CameraIntrinsics intr{100, 100, 50, 40, 100, 80};
  const std::vector<FrameCamera> cams(3, FrameCamera{intr, std::nullopt, CoordinateSystem::kXYZCamera, 2.0});
  const Matrix<double> tok = assemble_tokens<double>(s, nb, cams, l);
  ASSERT_EQ(tok.cols(), l.width());
  EXPECT_EQ(tok.row(2).head(2), nb.row(2));
  // Slot 0 has no predecessor: sin 0, cos 1.
  EXPECT_EQ(tok(0, l.prev_offset()), 0.0);
  EXPECT_EQ(tok(0, l.prev_offset() + 6), 1.0);
  // Slot 1, band 1, x-component of the backward difference 0.2.
  EXPECT_NEAR(tok(1, l.prev_offset() + 1), std::sin(2 * M_PI * 0.2), 1e-12);
  // Slot 1 forward difference in y is 0.3 (band 0).
  EXPECT_NEAR(tok(1, l.next_offset() + 2), std::sin(M_PI * 0.3), 1e-12);
  // Pixel of slot 2: unscaled (0.6, 1.0, 3.0) -> (70, 73.33); normalized (0.4, 0.8333).
  EXPECT_NEAR(tok(2, l.pixel_offset()), std::sin(M_PI * 0.4), 1e-12);
  EXPECT_NEAR(tok(2, l.pixel_offset() + 2), std::sin(M_PI * (2 * (40 + 100.0 / 3) / 80 - 1)), 1e-12);
  EXPECT_EQ(tok(1, l.logit_offset()), -1.0);
  EXPECT_NEAR(tok(2, l.time_offset()), std::sin(M_PI * 2.0 / 3.0), 1e-12);
  EXPECT_EQ(tok(0, l.time_offset() + 2), 1.0);

  s.positions(1, 2) = std::nan("");
  try {
    assemble_tokens<double>(s, nb, cams, l);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kAssembly);
  }
}

TEST(Refiner, LayoutTransposesAreInverse) {
  Rng rng(1);
  const auto x = gradcheck::random_matrix(12, 3, rng);
  const auto tm = to_time_major(x, 3, 4);
  EXPECT_EQ(tm.row(1 * 3 + 2), x.row(2 * 4 + 1));
  EXPECT_EQ(to_track_major(tm, 3, 4), x);
}

struct RefinerFixture {
  Refiner<double> refiner;
  ParamStore<double> params;
  RefinerFixture(int V, std::uint64_t seed) : refiner(RefinerConfig{2, 2, 8, V, 2, 2, 2}, 6) {
    Rng rng(seed);
    refiner.declare(params, rng);
    gradcheck::randomize(params, rng);
  }
  Matrix<double> run(const Matrix<double>& tokens, Eigen::Index Q, Eigen::Index T) const {
    return refiner.forward(params, tokens, Q, T, nullptr);
  }
};

TEST(Refiner, FreshHeadOutputsZero) {
  const Refiner<double> r(RefinerConfig{1, 2, 8, 2, 2, 2, 2}, 6);
  ParamStore<double> p;
  Rng rng(2);
  r.declare(p, rng);
  const auto out = r.forward(p, gradcheck::random_matrix(6, 6, rng), 2, 3, nullptr);
  EXPECT_EQ(out.cols(), 4);
  EXPECT_TRUE((out.array() == 0).all());
}

TEST(Refiner, EquivariantToQueryPermutation) {
  for (int V : {0, 3}) {
    const RefinerFixture f(V, 3);
    Rng rng(4);
    const Eigen::Index Q = 4, T = 3;
    const auto tokens = gradcheck::random_matrix(Q * T, 6, rng);
    const std::vector<int> perm{2, 0, 3, 1};
    Matrix<double> permuted(Q * T, 6);
    for (Eigen::Index q = 0; q < Q; ++q) permuted.middleRows(q * T, T) = tokens.middleRows(perm[q] * T, T);
    const auto a = f.run(tokens, Q, T), b = f.run(permuted, Q, T);
    for (Eigen::Index q = 0; q < Q; ++q)
      EXPECT_LT((b.middleRows(q * T, T) - a.middleRows(perm[q] * T, T)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Refiner, TracksInteractOnlyThroughVirtualTracks) {
  Rng rng(5);
  const Eigen::Index Q = 3, T = 4;
  const auto tokens = gradcheck::random_matrix(Q * T, 6, rng);
  Matrix<double> changed = tokens;
  changed.bottomRows(T).array() += 1.0;  // last query only
  {
    const RefinerFixture f(0, 6);
    const auto a = f.run(tokens, Q, T), b = f.run(changed, Q, T);
    EXPECT_EQ(a.topRows(2 * T), b.topRows(2 * T));
  }
  {
    const RefinerFixture f(2, 6);
    const auto a = f.run(tokens, Q, T), b = f.run(changed, Q, T);
    EXPECT_GT((a.topRows(2 * T) - b.topRows(2 * T)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Refiner, ShapeAndConfigErrors) {
  const RefinerFixture f(2, 7);
  Rng rng(8);
  EXPECT_THROW(f.run(gradcheck::random_matrix(5, 6, rng), 2, 3), Error);
  EXPECT_THROW(Refiner<double>(RefinerConfig{1, 3, 8, 2, 2, 2, 2}, 6), Error);
  EXPECT_NO_THROW(Refiner<double>(RefinerConfig{1, 2, 8, 0, 2, 2, 2}, 6));
}

TEST(Refiner, UpdateSplitsAndApplies) {
  TrajectoryState s = initialize_window(std::vector<Query>{{0, 0, Vec3(1, 1, 1)}}, 2);
  Matrix<float> out(2, 4);
  out << 0.5f, 0, 0, 1.0f, 0, -0.25f, 0, -2.0f;
  apply_update(s, split_update(out));
  EXPECT_EQ(s.position(0, 0), Vec3(1.5, 1, 1));
  EXPECT_EQ(s.position(0, 1), Vec3(1, 0.75, 1));
  EXPECT_EQ(s.logits(1), -2.0);
  EXPECT_EQ(s.iteration, 1);
}

TEST(Refiner, GradChecks) {
  for (int V : {0, 2}) {
    const auto r = grad_check(gradcheck::refiner_case(40 + V, V), gradcheck::kEpsilon, gradcheck::kTolerance,
                              gradcheck::kFloor);
    EXPECT_TRUE(r.passed) << r.name << " " << r.max_rel_error;
  }
}

}  // namespace
}  // namespace tapip3d
