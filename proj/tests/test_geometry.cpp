#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tapip3d/geometry.hpp"

namespace tapip3d {
namespace {

CameraIntrinsics odd_camera() { return {71.5, 64.25, 30.5, 22.75, 64, 48}; }

// Scalar reference pinhole model written independently of the library.
void ref_project(double x, double y, double z, const CameraIntrinsics& k, double& u, double& v) {
  u = k.fx * (x / z) + k.cx;
  v = k.fy * (y / z) + k.cy;
}

TEST(Geometry, ProjectMatchesScalarModel) {
  const auto k = odd_camera();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> xy(-2.0, 2.0), depth(0.2, 9.0);
  for (int i = 0; i < 500; ++i) {
    const Vec3 p(xy(rng), xy(rng), depth(rng));
    double u, v;
    ref_project(p.x(), p.y(), p.z(), k, u, v);
    const auto proj = project(p, k);
    EXPECT_NEAR(proj.uv.x(), u, 1e-12);
    EXPECT_NEAR(proj.uv.y(), v, 1e-12);
    EXPECT_FALSE(proj.behind_camera);
  }
}

TEST(Geometry, ProjectHandValues) {
  const CameraIntrinsics k;  // fx=fy=60, c=(32,24)
  const auto p = project(Vec3(1.0, -0.5, 2.0), k);
  EXPECT_DOUBLE_EQ(p.uv.x(), 62.0);
  EXPECT_DOUBLE_EQ(p.uv.y(), 9.0);
  EXPECT_TRUE(project(Vec3(0.0, 0.0, -1.0), k).behind_camera);
}

TEST(Geometry, ProjectRejectsCameraPlane) {
  try {
    project(Vec3(1.0, 1.0, 0.0), CameraIntrinsics{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateProjection);
  }
}

TEST(Geometry, UnprojectRejectsBadDepth) {
  for (double d : {0.0, -1.0, std::nan(""), std::numeric_limits<double>::infinity()}) {
    try {
      unproject(3.0, 4.0, d, CameraIntrinsics{});
      FAIL() << d;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kInvalidDepth);
    }
  }
}

TEST(Geometry, UnprojectInvertsProject) {
  const auto k = odd_camera();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 64.0), v(0.0, 48.0), d(0.1, 20.0);
  for (int i = 0; i < 1000; ++i) {
    const double uu = u(rng), vv = v(rng), dd = d(rng);
    const Vec3 p = unproject(uu, vv, dd, k);
    EXPECT_DOUBLE_EQ(p.z(), dd);
    const auto back = project(p, k);
    EXPECT_NEAR(back.uv.x(), uu, 1e-9);
    EXPECT_NEAR(back.uv.y(), vv, 1e-9);
  }
}

TEST(Geometry, RigidTransformAlgebra) {
  const auto a = RigidTransform::from_axis_angle(Vec3(0.1, -0.4, 0.3), Vec3(1.0, 2.0, -0.5));
  const auto b = RigidTransform::from_axis_angle(Vec3(-0.7, 0.2, 0.05), Vec3(-0.3, 0.0, 4.0));
  EXPECT_TRUE(a.is_valid());
  const Vec3 p(0.3, -1.2, 2.5);
  EXPECT_LT((a.inverse().apply(a.apply(p)) - p).norm(), 1e-12);
  EXPECT_LT(((a * b).apply(p) - a.apply(b.apply(p))).norm(), 1e-12);
  // Axis-angle: rotating the axis leaves it fixed.
  const Vec3 axis = Vec3(0.1, -0.4, 0.3).normalized();
  EXPECT_LT((a.rotation * axis - axis).norm(), 1e-12);
  EXPECT_NEAR(a.axis_angle().norm(), Vec3(0.1, -0.4, 0.3).norm(), 1e-12);
}

TEST(Geometry, RowMajorLayout) {
  const auto a = RigidTransform::from_axis_angle(Vec3(0.2, 0.1, -0.3), Vec3(5.0, 6.0, 7.0));
  const auto v = a.to_row_major();
  EXPECT_EQ(v[3], 5.0);
  EXPECT_EQ(v[7], 6.0);
  EXPECT_EQ(v[11], 7.0);
  EXPECT_EQ(v[1], a.rotation(0, 1));
  EXPECT_EQ(v[4], a.rotation(1, 0));
  const auto back = RigidTransform::from_row_major(v);
  EXPECT_EQ(back.rotation, a.rotation);
  EXPECT_EQ(back.translation, a.translation);
}

TEST(Geometry, ValidateRejectsNonRotation) {
  RigidTransform t;
  t.rotation(0, 0) = 2.0;
  EXPECT_FALSE(t.is_valid());
  EXPECT_THROW(t.validate(), Error);
  t.rotation = -Mat3::Identity();  // orthonormal but a reflection
  EXPECT_FALSE(t.is_valid());
}

TEST(Geometry, ParseAndPrintModes) {
  for (auto m : {CoordinateSystem::kUVD, CoordinateSystem::kUVLogD, CoordinateSystem::kXYZCamera,
                 CoordinateSystem::kXYZWorld})
    EXPECT_EQ(parse_coordinate_system(to_string(m)), m);
  EXPECT_THROW(parse_coordinate_system("xyz"), Error);
}

TEST(Geometry, ConvertHandValues) {
  const CameraIntrinsics k;
  const Vec3 cam(1.0, -0.5, 2.0);
  const Vec3 uvd = convert_coords(cam, CoordinateSystem::kXYZCamera, CoordinateSystem::kUVD, k);
  EXPECT_DOUBLE_EQ(uvd.x(), 62.0);
  EXPECT_DOUBLE_EQ(uvd.y(), 9.0);
  EXPECT_DOUBLE_EQ(uvd.z(), 2.0);
  const Vec3 uvlogd = convert_coords(cam, CoordinateSystem::kXYZCamera, CoordinateSystem::kUVLogD, k);
  EXPECT_DOUBLE_EQ(uvlogd.z(), std::log(2.0));
  const auto pose = RigidTransform::from_axis_angle(Vec3::Zero(), Vec3(1.0, 2.0, 3.0));
  const Vec3 w = convert_coords(cam, CoordinateSystem::kXYZCamera, CoordinateSystem::kXYZWorld, k, pose);
  EXPECT_EQ(w, Vec3(2.0, 1.5, 5.0));
}

TEST(Geometry, WorldNeedsPose) {
  try {
    convert_coords(Vec3(0, 0, 1), CoordinateSystem::kXYZWorld, CoordinateSystem::kXYZCamera, CameraIntrinsics{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

// Every ordered pair of spaces round-trips.
TEST(Geometry, AllPairsRoundTrip) {
  const auto k = odd_camera();
  const std::array<CoordinateSystem, 4> modes{CoordinateSystem::kUVD, CoordinateSystem::kUVLogD,
                                              CoordinateSystem::kXYZCamera, CoordinateSystem::kXYZWorld};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> xy(-1.5, 1.5), depth(0.3, 8.0), ang(-1.0, 1.0);
  for (int i = 0; i < 300; ++i) {
    const auto pose = RigidTransform::from_axis_angle(Vec3(ang(rng), ang(rng), ang(rng)),
                                                      Vec3(ang(rng), ang(rng), ang(rng)) * 3.0);
    const Vec3 cam(xy(rng), xy(rng), depth(rng));
    for (auto a : modes) {
      const Vec3 pa = convert_coords(cam, CoordinateSystem::kXYZCamera, a, k, pose);
      for (auto b : modes) {
        const Vec3 pb = convert_coords(pa, a, b, k, pose);
        const Vec3 back = convert_coords(pb, b, a, k, pose);
        EXPECT_LT((back - pa).norm(), 1e-9 * std::max(1.0, pa.norm()));
      }
    }
  }
}

// Two-pass population std over all components, computed with long double.
double ref_scale(const std::vector<Vec3>& pts) {
  long double sum = 0;
  for (const auto& p : pts)
    for (int d = 0; d < 3; ++d) sum += p(d);
  const long double mean = sum / (3.0L * pts.size());
  long double sq = 0;
  for (const auto& p : pts)
    for (int d = 0; d < 3; ++d) sq += (p(d) - mean) * (p(d) - mean);
  return static_cast<double>(std::sqrt(sq / (3.0L * pts.size())));
}

TEST(Geometry, ScaleFactorMatchesOracle) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> c(-3.0, 3.0), z(0.5, 10.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 777; ++i) pts.emplace_back(c(rng), c(rng), z(rng));
  EXPECT_NEAR(compute_scale_factor(pts).sigma, ref_scale(pts), 1e-12);
  std::vector<Vec3> kept;
  for (const auto& p : pts)
    if (p.z() <= 4.0) kept.push_back(p);
  EXPECT_NEAR(compute_scale_factor(pts, 4.0).sigma, ref_scale(kept), 1e-12);
}

TEST(Geometry, ScaleFactorHandValue) {
  // Components {0,0,0} and {2,2,2}: mean 1, every deviation 1.
  const std::vector<Vec3> pts{Vec3(0, 0, 0), Vec3(2, 2, 2)};
  const std::vector<double> depth{1.0, 1.0};
  EXPECT_DOUBLE_EQ(compute_scale_factor(pts, depth).sigma, 1.0);
}

TEST(Geometry, ScaleFactorDegenerate) {
  const std::vector<Vec3> same(5, Vec3(1, 1, 1));
  EXPECT_THROW(compute_scale_factor(same), Error);
  const std::vector<Vec3> far{Vec3(0, 0, 10), Vec3(1, 0, 11)};
  try {
    compute_scale_factor(far, 2.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateScale);
  }
}

TEST(Geometry, ScaleFactorEquivariance) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> c(-3.0, 3.0);
  std::vector<Vec3> pts, scaled;
  for (int i = 0; i < 100; ++i) pts.emplace_back(c(rng), c(rng), 1.0 + std::abs(c(rng)));
  for (const auto& p : pts) scaled.push_back(p * 2.5);
  EXPECT_NEAR(compute_scale_factor(scaled).sigma, 2.5 * compute_scale_factor(pts).sigma, 1e-12);
}

TEST(Geometry, RigidSequenceIsSmoothAndValid) {
  RigidSequenceConfig cfg{20.0, 0.5, 8};
  const auto seq = random_rigid_sequence(33, cfg, 9);
  ASSERT_EQ(seq.size(), 33u);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    EXPECT_TRUE(seq[i].is_valid(1e-9));
    EXPECT_LE(seq[i].translation.cwiseAbs().maxCoeff(), 0.5 + 1e-12);
    if (i == 0) continue;
    const Mat3 rel = seq[i - 1].rotation.transpose() * seq[i].rotation;
    const double angle = std::acos(std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0)) * 180.0 / M_PI;
    EXPECT_LE(angle, cfg.max_step_rotation_deg() + 1e-9);
  }
  const auto again = random_rigid_sequence(33, cfg, 9);
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_EQ(seq[i].rotation, again[i].rotation);
  const auto still = random_rigid_sequence(5, RigidSequenceConfig{0.0, 0.0, 4}, 1);
  for (const auto& t : still) {
    EXPECT_EQ(t.rotation, Mat3::Identity());
    EXPECT_EQ(t.translation, Vec3::Zero());
  }
}

TEST(Geometry, IntrinsicsValidation) {
  EXPECT_NO_THROW(CameraIntrinsics{}.validate());
  EXPECT_THROW((CameraIntrinsics{0.0, 60.0, 32.0, 24.0, 64, 48}.validate()), Error);
  EXPECT_THROW((CameraIntrinsics{60.0, 60.0, 70.0, 24.0, 64, 48}.validate()), Error);
}

}  // namespace
}  // namespace tapip3d
