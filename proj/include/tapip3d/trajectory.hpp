#pragma once

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/n2n_attention.hpp"
#include "tapip3d/nn.hpp"
#include "tapip3d/tensor.hpp"

namespace tapip3d {

/// A point to track: frame index plus a position in the active coordinate
/// system (normalized by the scale factor once inside a window).
struct Query {
  int id = 0;
  int frame = 0;
  Vec3 position = Vec3::Zero();
};

/// Window state; row q * T + t holds query q at window slot t.
struct TrajectoryState {
  Eigen::Index queries = 0;
  Eigen::Index timesteps = 0;
  Matrix<double> positions;  // [Q*T, 3]
  Eigen::VectorXd logits;    // [Q*T]
  int iteration = 0;

  Eigen::Index row(Eigen::Index q, Eigen::Index t) const { return q * timesteps + t; }
  Vec3 position(Eigen::Index q, Eigen::Index t) const { return positions.row(row(q, t)).transpose(); }
};

/// Zero-motion start: every slot holds the query position, logits zero.
inline TrajectoryState initialize_window(std::span<const Query> queries, Eigen::Index timesteps) {
  require(!queries.empty(), ErrorCode::kEmptyWindow, "no active queries in window");
  require(timesteps >= 1, ErrorCode::kConfig, "window length must be >= 1");
  TrajectoryState s;
  s.queries = static_cast<Eigen::Index>(queries.size());
  s.timesteps = timesteps;
  s.positions.resize(s.queries * timesteps, 3);
  s.logits = Eigen::VectorXd::Zero(s.queries * timesteps);
  for (Eigen::Index q = 0; q < s.queries; ++q)
    for (Eigen::Index t = 0; t < timesteps; ++t) s.positions.row(s.row(q, t)) = queries[q].position.transpose();
  return s;
}

/// Column layout of a trajectory token:
/// [N | g(dprev) | g(dnext) | g(pixel) | logit | g(time)].
struct TokenLayout {
  Eigen::Index neighborhood = 0;
  int bands = 8;

  Eigen::Index motion_width() const { return 2 * bands * 3; }
  Eigen::Index pixel_width() const { return 2 * bands * 2; }
  Eigen::Index time_width() const { return 2 * bands; }

  Eigen::Index prev_offset() const { return neighborhood; }
  Eigen::Index next_offset() const { return prev_offset() + motion_width(); }
  Eigen::Index pixel_offset() const { return next_offset() + motion_width(); }
  Eigen::Index logit_offset() const { return pixel_offset() + pixel_width(); }
  Eigen::Index time_offset() const { return logit_offset() + 1; }
  Eigen::Index width() const { return time_offset() + time_width(); }
};

/// Pixels normalized to [-1, 1] across the image.
inline Vec2 normalized_pixel(const Vec2& uv, const CameraIntrinsics& intr) {
  return {2.0 * uv.x() / intr.width - 1.0, 2.0 * uv.y() / intr.height - 1.0};
}

/// Builds Q*T tokens in (q, t) row order. `cameras[t]` maps slot t's
/// normalized points to its frame's pixels.
template <typename S>
Matrix<S> assemble_tokens(const TrajectoryState& state, const Matrix<S>& neighborhood,
                          std::span<const FrameCamera> cameras, const TokenLayout& layout) {
  const Eigen::Index Q = state.queries, T = state.timesteps;
  require(neighborhood.rows() == Q * T && neighborhood.cols() == layout.neighborhood, ErrorCode::kShape,
          "neighborhood features " + shape_string(neighborhood.rows(), neighborhood.cols()) + " vs " +
              shape_string(Q * T, layout.neighborhood));
  require(static_cast<Eigen::Index>(cameras.size()) == T, ErrorCode::kShape, "one camera per window slot");
  const nn::FourierEncoding fourier{layout.bands, 1.0};
  Matrix<double> prev(Q * T, 3), next(Q * T, 3), pixel(Q * T, 2), time(Q * T, 1);
  for (Eigen::Index q = 0; q < Q; ++q) {
    for (Eigen::Index t = 0; t < T; ++t) {
      const Eigen::Index r = state.row(q, t);
      const Vec3 p = state.position(q, t);
      if (!p.allFinite() || !std::isfinite(state.logits(r)) || !neighborhood.row(r).allFinite())
        fail(ErrorCode::kAssembly,
             "non-finite token input at query " + std::to_string(q) + ", step " + std::to_string(t));
      prev.row(r) = t > 0 ? Eigen::RowVector3d((p - state.position(q, t - 1)).transpose()) : Eigen::RowVector3d::Zero();
      next.row(r) = t + 1 < T ? Eigen::RowVector3d((state.position(q, t + 1) - p).transpose()) : Eigen::RowVector3d::Zero();
      pixel.row(r) = normalized_pixel(cameras[t].pixel(p), cameras[t].intrinsics).transpose();
      time(r, 0) = static_cast<double>(t) / static_cast<double>(T);
    }
  }
  Matrix<S> tokens(Q * T, layout.width());
  tokens.leftCols(layout.neighborhood) = neighborhood;
  tokens.middleCols(layout.prev_offset(), layout.motion_width()) = fourier.encode<S>(prev);
  tokens.middleCols(layout.next_offset(), layout.motion_width()) = fourier.encode<S>(next);
  tokens.middleCols(layout.pixel_offset(), layout.pixel_width()) = fourier.encode<S>(pixel);
  tokens.col(layout.logit_offset()) = state.logits.cast<S>();
  tokens.middleCols(layout.time_offset(), layout.time_width()) = fourier.encode<S>(time);
  return tokens;
}

/// Only the neighborhood block carries gradient; the rest derives from the
/// (detached) state.
template <typename S>
Matrix<S> assemble_tokens_backward(const Matrix<S>& dtokens, const TokenLayout& layout) {
  return dtokens.leftCols(layout.neighborhood);
}

}  // namespace tapip3d
