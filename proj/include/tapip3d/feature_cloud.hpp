#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/nn.hpp"
#include "tapip3d/tensor.hpp"

namespace tapip3d {

/// Per-pixel 3D coordinates (in whatever tracking space is active) with a
/// validity mask. Invalid cells carry no meaning.
struct PointMap {
  int width = 0;
  int height = 0;
  std::vector<Vec3> coords;
  std::vector<std::uint8_t> valid;

  PointMap() = default;
  PointMap(int w, int h) : width(w), height(h), coords(std::size_t(w) * h, Vec3::Zero()), valid(std::size_t(w) * h, 0) {}

  std::size_t index(int row, int col) const { return std::size_t(row) * width + col; }
};

/// RGB frame, row-major HxWx3 in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  float at(int row, int col, int ch) const { return rgb[(std::size_t(row) * width + col) * 3 + ch]; }
};

/// Grid-arranged 3D coordinates of one pyramid level. Cell (row, col) is
/// anchored at full-resolution pixel (col * stride, row * stride).
struct CloudGrid {
  int width = 0;
  int height = 0;
  int stride = 1;
  std::vector<Vec3> coords;
  std::vector<std::uint8_t> valid;

  std::size_t cells() const { return coords.size(); }
  std::size_t index(int row, int col) const { return std::size_t(row) * width + col; }
  std::size_t valid_count() const { return std::count(valid.begin(), valid.end(), std::uint8_t{1}); }

  CloudGrid scaled(double factor) const {
    CloudGrid out = *this;
    for (auto& c : out.coords) c *= factor;
    return out;
  }
};

/// One level of a frame's feature cloud: C-dim features plus XYZ per cell.
template <typename S>
struct FeatureMap {
  int level = 1;
  CloudGrid grid;
  Matrix<S> features;  // [cells, C]

  int width() const { return grid.width; }
  int height() const { return grid.height; }
  Eigen::Index channels() const { return features.cols(); }
};

/// Per-frame pyramid entries: frames[t][l].
template <typename S>
struct FeatureCloudPyramid {
  CoordinateSystem system = CoordinateSystem::kXYZCamera;
  std::vector<std::vector<FeatureMap<S>>> frames;
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

struct EncoderConfig {
  int channels = 64;
  int stride = 4;  // downsampling rate; power of two
  int blocks = 3;
};

/// Seeded stand-in image encoder: `blocks` 3x3 convolutions with replicate
/// padding; the first log2(stride) blocks have stride 2. GELU between blocks.
template <typename S>
class ToyEncoder {
 public:
  struct LayerCache {
    Matrix<S> cols;
    std::vector<std::int32_t> taps;  // source row for each (output row, tap)
    Matrix<S> pre;
    int in_rows = 0;
  };
  struct Cache {
    std::vector<LayerCache> layers;
  };

  ToyEncoder() = default;
  explicit ToyEncoder(EncoderConfig config) : config_(config) {
    int s = config.stride, downs = 0;
    require(s >= 1 && (s & (s - 1)) == 0, ErrorCode::kConfig, "encoder stride must be a power of two");
    while (s > 1) {
      s >>= 1;
      ++downs;
    }
    require(downs <= config.blocks, ErrorCode::kConfig, "encoder needs at least log2(stride) blocks");
    int in = 3;
    for (int b = 0; b < config.blocks; ++b) {
      const int out = b + 1 == config.blocks ? config.channels : std::max(8, config.channels / 2);
      layers_.push_back({nn::Linear<S>("encoder.conv" + std::to_string(b), 9 * in, out), b < downs ? 2 : 1});
      in = out;
    }
  }

  const EncoderConfig& config() const { return config_; }

  void declare(ParamStore<S>& p, Rng& rng) const {
    for (const auto& l : layers_) l.conv.declare(p, rng);
  }

  int output_width(int image_width) const { return ceil_div(image_width, config_.stride); }
  int output_height(int image_height) const { return ceil_div(image_height, config_.stride); }

  /// Returns [ceil(H/stride) * ceil(W/stride), C] features in row-major cell order.
  Matrix<S> forward(const ParamStore<S>& p, const Image& image, Cache* cache) const {
    const int padded_w = output_width(image.width) * config_.stride;
    const int padded_h = output_height(image.height) * config_.stride;
    Matrix<S> x(std::size_t(padded_w) * padded_h, 3);
    for (int r = 0; r < padded_h; ++r)
      for (int c = 0; c < padded_w; ++c)
        for (int ch = 0; ch < 3; ++ch)
          x(std::size_t(r) * padded_w + c, ch) =
              static_cast<S>(2.0f * image.at(std::min(r, image.height - 1), std::min(c, image.width - 1), ch) - 1.0f);
    int w = padded_w, h = padded_h;
    if (cache) cache->layers.assign(layers_.size(), {});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& layer = layers_[i];
      LayerCache local;
      LayerCache& lc = cache ? cache->layers[i] : local;
      const int ow = layer.stride == 2 ? w / 2 : w;
      const int oh = layer.stride == 2 ? h / 2 : h;
      im2col(x, w, h, layer.stride, ow, oh, lc);
      lc.in_rows = static_cast<int>(x.rows());
      lc.pre = layer.conv.forward(p, lc.cols);
      x = i + 1 == layers_.size() ? lc.pre : nn::gelu(lc.pre);
      w = ow;
      h = oh;
      if (!cache) lc = {};
    }
    return x;
  }

  /// Accumulates parameter gradients given d(features).
  void backward(ParamStore<S>& p, const Cache& cache, const Matrix<S>& dfeatures) const {
    Matrix<S> dy = dfeatures;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const auto& lc = cache.layers[i];
      if (i + 1 != layers_.size()) dy = nn::gelu_backward(lc.pre, dy);
      Matrix<S> dcols = layers_[i].conv.backward(p, lc.cols, dy);
      const Eigen::Index in_ch = dcols.cols() / 9;
      Matrix<S> dx = Matrix<S>::Zero(lc.in_rows, in_ch);
      for (Eigen::Index r = 0; r < dcols.rows(); ++r)
        for (int t = 0; t < 9; ++t) dx.row(lc.taps[r * 9 + t]) += dcols.block(r, t * in_ch, 1, in_ch);
      dy = std::move(dx);
    }
  }

 private:
  struct Layer {
    nn::Linear<S> conv;
    int stride = 1;
  };

  static void im2col(const Matrix<S>& x, int w, int h, int stride, int ow, int oh, LayerCache& lc) {
    const Eigen::Index in_ch = x.cols();
    lc.cols.resize(std::size_t(ow) * oh, 9 * in_ch);
    lc.taps.resize(std::size_t(ow) * oh * 9);
    for (int r = 0; r < oh; ++r) {
      for (int c = 0; c < ow; ++c) {
        const std::size_t out_row = std::size_t(r) * ow + c;
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const int sr = std::clamp(r * stride + ky - 1, 0, h - 1);
            const int sc = std::clamp(c * stride + kx - 1, 0, w - 1);
            const int tap = ky * 3 + kx;
            const auto src = static_cast<std::int32_t>(std::size_t(sr) * w + sc);
            lc.taps[out_row * 9 + tap] = src;
            lc.cols.block(out_row, tap * in_ch, 1, in_ch) = x.row(src);
          }
        }
      }
    }
  }

  EncoderConfig config_;
  std::vector<Layer> layers_;
};

/// External feature grid passthrough with a shape check.
template <typename S>
Matrix<S> ingest_external_features(const Matrix<S>& features, int grid_width, int grid_height,
                                   Eigen::Index channels) {
  if (features.rows() != Eigen::Index(grid_width) * grid_height || features.cols() != channels)
    fail(ErrorCode::kFormat, "external features " + shape_string(features.rows(), features.cols()) +
                                 " do not match grid " + std::to_string(grid_height) + "x" +
                                 std::to_string(grid_width) + "x" + std::to_string(channels));
  return features;
}

/// Each cell takes the coordinate (and validity) of the pixel at its stride
/// anchor.
inline CloudGrid attach_grid(const PointMap& points, int stride) {
  CloudGrid grid;
  grid.stride = stride;
  grid.width = ceil_div(points.width, stride);
  grid.height = ceil_div(points.height, stride);
  grid.coords.assign(std::size_t(grid.width) * grid.height, Vec3::Zero());
  grid.valid.assign(grid.coords.size(), 0);
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      const std::size_t src = points.index(r * stride, c * stride);
      const std::size_t dst = grid.index(r, c);
      grid.valid[dst] = points.valid[src];
      grid.coords[dst] = points.valid[src] ? points.coords[src] : Vec3::Zero();
    }
  }
  return grid;
}

template <typename S>
FeatureMap<S> attach_coordinates(const Matrix<S>& base_features, const PointMap& points, int stride) {
  FeatureMap<S> out;
  out.level = 1;
  out.grid = attach_grid(points, stride);
  require(base_features.rows() == Eigen::Index(out.grid.cells()), ErrorCode::kShape,
          "base features " + shape_string(base_features.rows(), base_features.cols()) + " vs grid of " +
              std::to_string(out.grid.cells()) + " cells");
  out.features = base_features;
  return out;
}

/// Number of distinct levels a grid supports before reaching 1x1.
inline int max_pyramid_levels(int width, int height) {
  int levels = 1;
  while (width > 1 || height > 1) {
    width = ceil_div(width, 2);
    height = ceil_div(height, 2);
    ++levels;
  }
  return levels;
}

/// Nearest-neighbor (top-left pick) 2x downsampling of coordinates.
inline CloudGrid downsample_grid(const CloudGrid& src) {
  CloudGrid out;
  out.stride = src.stride * 2;
  out.width = ceil_div(src.width, 2);
  out.height = ceil_div(src.height, 2);
  out.coords.assign(std::size_t(out.width) * out.height, Vec3::Zero());
  out.valid.assign(out.coords.size(), 0);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      const std::size_t pick = src.index(2 * r, 2 * c);
      out.coords[out.index(r, c)] = src.coords[pick];
      out.valid[out.index(r, c)] = src.valid[pick];
    }
  }
  return out;
}

namespace detail {

/// Source cells of 2x2 block (r, c), clipped at the border.
inline int block_cells(const CloudGrid& src, int r, int c, std::size_t (&cells)[4]) {
  int n = 0;
  for (int dr = 0; dr < 2; ++dr)
    for (int dc = 0; dc < 2; ++dc)
      if (2 * r + dr < src.height && 2 * c + dc < src.width) cells[n++] = src.index(2 * r + dr, 2 * c + dc);
  return n;
}

/// Pooling weights: uniform over valid cells; uniform over all cells when
/// the block has none.
inline int pooling_sources(const CloudGrid& src, int r, int c, std::size_t (&cells)[4]) {
  std::size_t all[4];
  const int n = block_cells(src, r, c, all);
  int m = 0;
  for (int i = 0; i < n; ++i)
    if (src.valid[all[i]]) cells[m++] = all[i];
  if (m == 0) {
    for (int i = 0; i < n; ++i) cells[i] = all[i];
    m = n;
  }
  return m;
}

}  // namespace detail

template <typename S>
Matrix<S> pool_features(const Matrix<S>& features, const CloudGrid& src) {
  const int ow = ceil_div(src.width, 2), oh = ceil_div(src.height, 2);
  Matrix<S> out = Matrix<S>::Zero(Eigen::Index(ow) * oh, features.cols());
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      std::size_t cells[4];
      const int m = detail::pooling_sources(src, r, c, cells);
      auto row = out.row(Eigen::Index(r) * ow + c);
      for (int i = 0; i < m; ++i) row += features.row(static_cast<Eigen::Index>(cells[i]));
      row /= static_cast<S>(m);
    }
  }
  return out;
}

template <typename S>
Matrix<S> pool_features_backward(const Matrix<S>& dpooled, const CloudGrid& src) {
  const int ow = ceil_div(src.width, 2), oh = ceil_div(src.height, 2);
  Matrix<S> dx = Matrix<S>::Zero(Eigen::Index(src.cells()), dpooled.cols());
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      std::size_t cells[4];
      const int m = detail::pooling_sources(src, r, c, cells);
      const auto g = dpooled.row(Eigen::Index(r) * ow + c) / static_cast<S>(m);
      for (int i = 0; i < m; ++i) dx.row(static_cast<Eigen::Index>(cells[i])) += g;
    }
  }
  return dx;
}

inline std::vector<CloudGrid> build_grid_pyramid(const CloudGrid& level1, int levels) {
  require(levels >= 1, ErrorCode::kConfig, "pyramid needs at least one level");
  require(levels <= max_pyramid_levels(level1.width, level1.height), ErrorCode::kConfig,
          "pyramid of " + std::to_string(levels) + " levels is too deep for a " + std::to_string(level1.height) +
              "x" + std::to_string(level1.width) + " grid");
  std::vector<CloudGrid> out{level1};
  for (int l = 1; l < levels; ++l) out.push_back(downsample_grid(out.back()));
  return out;
}

/// Level l+1: 2x2 average pooling over valid features, nearest-neighbor pick
/// of one coordinate per block.
template <typename S>
std::vector<FeatureMap<S>> build_pyramid(const FeatureMap<S>& level1, int levels) {
  const std::vector<CloudGrid> grids = build_grid_pyramid(level1.grid, levels);
  std::vector<FeatureMap<S>> out;
  out.push_back(level1);
  for (int l = 1; l < levels; ++l) {
    FeatureMap<S> next;
    next.level = l + 1;
    next.grid = grids[l];
    next.features = pool_features(out.back().features, out.back().grid);
    out.push_back(std::move(next));
  }
  return out;
}

/// Feature pyramid (no geometry) over precomputed grids.
template <typename S>
std::vector<Matrix<S>> pool_pyramid(const Matrix<S>& level1, const std::vector<CloudGrid>& grids) {
  std::vector<Matrix<S>> out{level1};
  for (std::size_t l = 1; l < grids.size(); ++l) out.push_back(pool_features(out.back(), grids[l - 1]));
  return out;
}

/// Folds per-level feature cotangents back onto level 1.
template <typename S>
Matrix<S> pool_pyramid_backward(std::vector<Matrix<S>> dlevels, const std::vector<CloudGrid>& grids) {
  for (std::size_t l = dlevels.size(); l-- > 1;) dlevels[l - 1] += pool_features_backward(dlevels[l], grids[l - 1]);
  return dlevels[0];
}

}  // namespace tapip3d
