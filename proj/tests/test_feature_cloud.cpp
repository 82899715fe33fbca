#include <gtest/gtest.h>

#include <random>

#include "tapip3d/feature_cloud.hpp"

namespace tapip3d {
namespace {

PointMap ramp_points(int w, int h) {
  PointMap pm(w, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      pm.coords[pm.index(r, c)] = Vec3(c, r, 1.0 + 0.01 * (r * w + c));
      pm.valid[pm.index(r, c)] = 1;
    }
  return pm;
}

TEST(FeatureCloud, AttachGridPicksStrideAnchors) {
  PointMap pm = ramp_points(7, 5);
  pm.valid[pm.index(2, 4)] = 0;
  const CloudGrid g = attach_grid(pm, 2);
  EXPECT_EQ(g.width, 4);
  EXPECT_EQ(g.height, 3);
  EXPECT_EQ(g.coords[g.index(1, 3)], pm.coords[pm.index(2, 6)]);
  EXPECT_EQ(g.coords[g.index(2, 0)], pm.coords[pm.index(4, 0)]);
  EXPECT_EQ(g.valid[g.index(1, 2)], 0);  // anchor pixel (2, 4) is invalid
  EXPECT_EQ(g.valid_count(), 11u);
}

TEST(FeatureCloud, PyramidDepthLimits) {
  EXPECT_EQ(max_pyramid_levels(1, 1), 1);
  EXPECT_EQ(max_pyramid_levels(16, 12), 5);
  const CloudGrid g = attach_grid(ramp_points(8, 6), 1);
  EXPECT_EQ(build_grid_pyramid(g, 4).back().width, 1);
  EXPECT_THROW(build_grid_pyramid(g, 5), Error);
  EXPECT_THROW(build_grid_pyramid(g, 0), Error);
}

TEST(FeatureCloud, DownsampleTakesTopLeftCoordinate) {
  const CloudGrid g = attach_grid(ramp_points(5, 3), 1);
  const CloudGrid d = downsample_grid(g);
  EXPECT_EQ(d.width, 3);
  EXPECT_EQ(d.height, 2);
  EXPECT_EQ(d.stride, 2);
  EXPECT_EQ(d.coords[d.index(1, 2)], g.coords[g.index(2, 4)]);
}

// Block averages by explicit loops over the 2x2 window.
Matrix<double> ref_pool(const Matrix<double>& f, const CloudGrid& g) {
  const int ow = (g.width + 1) / 2, oh = (g.height + 1) / 2;
  Matrix<double> out(ow * oh, f.cols());
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      RowVector<double> acc_valid = RowVector<double>::Zero(f.cols()), acc_all = acc_valid;
      int n_valid = 0, n_all = 0;
      for (int dr = 0; dr < 2; ++dr)
        for (int dc = 0; dc < 2; ++dc) {
          const int rr = 2 * r + dr, cc = 2 * c + dc;
          if (rr >= g.height || cc >= g.width) continue;
          const auto i = static_cast<Eigen::Index>(g.index(rr, cc));
          acc_all += f.row(i);
          ++n_all;
          if (g.valid[i]) {
            acc_valid += f.row(i);
            ++n_valid;
          }
        }
      out.row(r * ow + c) = n_valid ? RowVector<double>(acc_valid / n_valid) : RowVector<double>(acc_all / n_all);
    }
  return out;
}

TEST(FeatureCloud, PoolingMatchesReference) {
  PointMap pm = ramp_points(7, 5);
  for (int c : {0, 1}) pm.valid[pm.index(0, c)] = pm.valid[pm.index(1, c)] = 0;  // one all-invalid block
  pm.valid[pm.index(2, 3)] = 0;
  const CloudGrid g = attach_grid(pm, 1);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Matrix<double> f(g.cells(), 3);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = n(rng);
  EXPECT_LT((pool_features(f, g) - ref_pool(f, g)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(FeatureCloud, PoolPyramidBackwardIsAdjoint) {
  PointMap pm = ramp_points(9, 7);
  pm.valid[pm.index(4, 4)] = 0;
  const auto grids = build_grid_pyramid(attach_grid(pm, 1), 3);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  Matrix<double> x(grids[0].cells(), 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  const auto levels = pool_pyramid(x, grids);
  std::vector<Matrix<double>> dl;
  double lhs = 0.0;
  for (const auto& l : levels) {
    Matrix<double> d(l.rows(), l.cols());
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = n(rng);
    lhs += (d.array() * l.array()).sum();
    dl.push_back(d);
  }
  const Matrix<double> dx = pool_pyramid_backward(dl, grids);
  EXPECT_NEAR(lhs, (dx.array() * x.array()).sum(), 1e-10);
}

TEST(FeatureCloud, EncoderMatchesNaiveConvolution) {
  const ToyEncoder<double> enc(EncoderConfig{5, 1, 1});
  ParamStore<double> p;
  Rng rng(3);
  enc.declare(p, rng);
  Image img{5, 4, {}};
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 5 * 4 * 3; ++i) img.rgb.push_back(u(rng));
  const Matrix<double> out = enc.forward(p, img, nullptr);
  ASSERT_EQ(out.rows(), 20);
  ASSERT_EQ(out.cols(), 5);
  const auto W = p.value("encoder.conv0.weight");
  const auto b = p.value("encoder.conv0.bias");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c)
      for (int o = 0; o < 5; ++o) {
        double acc = b(0, o);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int ch = 0; ch < 3; ++ch) {
              const int sr = std::clamp(r + ky - 1, 0, 3), sc = std::clamp(c + kx - 1, 0, 4);
              acc += W(o, (ky * 3 + kx) * 3 + ch) * (2.0 * img.at(sr, sc, ch) - 1.0);
            }
        EXPECT_NEAR(out(r * 5 + c, o), acc, 1e-6);
      }
}

TEST(FeatureCloud, EncoderShapesAndDeterminism) {
  const ToyEncoder<float> enc(EncoderConfig{16, 4, 2});
  ParamStore<float> p1, p2;
  Rng r1(7), r2(7);
  enc.declare(p1, r1);
  enc.declare(p2, r2);
  Image img{13, 9, std::vector<float>(13 * 9 * 3, 0.25f)};
  img.rgb[40] = 0.9f;
  const auto a = enc.forward(p1, img, nullptr), b = enc.forward(p2, img, nullptr);
  EXPECT_EQ(a.rows(), 4 * 3);
  EXPECT_EQ(a.cols(), 16);
  EXPECT_TRUE((a.array() == b.array()).all());
  EXPECT_THROW(ToyEncoder<float>(EncoderConfig{8, 3, 2}), Error);
  EXPECT_THROW(ToyEncoder<float>(EncoderConfig{8, 8, 2}), Error);
}

TEST(FeatureCloud, ExternalFeatureShapeCheck) {
  Matrix<float> f(12, 4);
  f.setOnes();
  EXPECT_NO_THROW(ingest_external_features(f, 4, 3, 4));
  try {
    ingest_external_features(f, 4, 4, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
}

}  // namespace
}  // namespace tapip3d
