#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/feature_cloud.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/n2n_attention.hpp"
#include "tapip3d/refiner.hpp"
#include "tapip3d/tensor.hpp"
#include "tapip3d/trajectory.hpp"

namespace tapip3d {

struct ModelConfig {
  EncoderConfig encoder;
  int levels = 3;
  NeighborConfig neighbors;
  N2NConfig attention;
  RefinerConfig refiner;
  int window = 16;
  int token_bands = 8;

  /// Full desk-scale model.
  static ModelConfig desk() { return {}; }

  /// Reduced model used by the toy trainer and the CLI defaults.
  static ModelConfig toy() {
    ModelConfig c;
    c.encoder = {16, 4, 2};
    c.levels = 2;
    c.neighbors.k = 8;
    c.attention.channels = 16;
    c.attention.heads = 2;
    c.attention.fourier_bands = 6;
    c.refiner = {2, 2, 64, 4, 4, 2, 6};
    c.token_bands = 6;
    return c;
  }

  /// Smallest sensible model, for finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.encoder = {4, 2, 1};
    c.levels = 2;
    c.neighbors.k = 3;
    c.neighbors.window_radius = 1;
    c.attention.channels = 4;
    c.attention.heads = 2;
    c.attention.mlp_ratio = 1;
    c.attention.fourier_bands = 2;
    c.refiner = {1, 2, 8, 2, 2, 1, 2};
    c.window = 4;
    c.token_bands = 2;
    return c;
  }

  void validate() const {
    require(levels >= 1, ErrorCode::kConfig, "need at least one pyramid level");
    require(window >= 2, ErrorCode::kConfig, "window length must be >= 2");
    require(neighbors.k >= 1 && neighbors.window_radius >= 0, ErrorCode::kConfig, "invalid neighborhood size");
    require(attention.channels == encoder.channels, ErrorCode::kConfig,
            "attention width must equal encoder channels");
    require(attention.channels % attention.heads == 0, ErrorCode::kConfig,
            "attention width must be divisible by heads");
    require(token_bands >= 1 && attention.fourier_bands >= 1, ErrorCode::kConfig, "need at least one band");
    refiner.validate();
  }
};

/// Normalized geometry of one frame: the grid pyramid of `points` (active
/// space, unscaled) divided by the camera's sigma, plus indices.
inline FrameGeometry build_frame_geometry(const PointMap& points, int stride, int levels, const FrameCamera& camera) {
  const CloudGrid base = attach_grid(points, stride).scaled(1.0 / camera.sigma);
  return FrameGeometry(build_grid_pyramid(base, levels), camera);
}

/// Everything one window needs besides the trajectory state.
template <typename S>
struct WindowContext {
  std::vector<int> slot_frames;                             // video frame of each slot
  const std::vector<FrameGeometry>* frames = nullptr;       // indexed by video frame
  const std::vector<std::vector<Matrix<S>>>* features = nullptr;  // [frame][level]

  Eigen::Index steps() const { return static_cast<Eigen::Index>(slot_frames.size()); }

  std::vector<FrameCamera> slot_cameras() const {
    std::vector<FrameCamera> out;
    for (int f : slot_frames) out.push_back((*frames)[f].camera);
    return out;
  }

  std::vector<const Matrix<S>*> level_features(int level) const {
    std::vector<const Matrix<S>*> out;
    for (const auto& f : *features) out.push_back(&f[level]);
    return out;
  }
};

/// Per-frame, per-level feature cotangents.
template <typename S>
using FeatureGradients = std::vector<std::vector<Matrix<S>>>;

template <typename S>
FeatureGradients<S> zero_feature_gradients(const std::vector<std::vector<Matrix<S>>>& features) {
  FeatureGradients<S> out(features.size());
  for (std::size_t f = 0; f < features.size(); ++f)
    for (const auto& m : features[f]) out[f].push_back(Matrix<S>::Zero(m.rows(), m.cols()));
  return out;
}

template <typename S>
class TrackerModel {
 public:
  struct IterationCache {
    std::vector<std::vector<Bag>> context;  // [level]
    std::vector<typename NeighborhoodAttention<S>::LevelCache> levels;
    typename Refiner<S>::Cache refiner;
  };

  TrackerModel() = default;
  explicit TrackerModel(ModelConfig config) : config_(config) {
    config.validate();
    encoder_ = ToyEncoder<S>(config.encoder);
    attention_ = NeighborhoodAttention<S>(config.attention);
    layout_ = TokenLayout{static_cast<Eigen::Index>(config.levels) * config.attention.channels, config.token_bands};
    refiner_ = Refiner<S>(config.refiner, layout_.width());
  }

  const ModelConfig& config() const { return config_; }
  const ToyEncoder<S>& encoder() const { return encoder_; }
  const NeighborhoodAttention<S>& attention() const { return attention_; }
  const Refiner<S>& refiner() const { return refiner_; }
  const TokenLayout& layout() const { return layout_; }

  void declare(ParamStore<S>& p, Rng& rng) const {
    encoder_.declare(p, rng);
    attention_.declare(p, rng);
    refiner_.declare(p, rng);
  }

  ParamStore<S> init_params(std::uint64_t seed) const {
    ParamStore<S> p;
    Rng rng(seed);
    declare(p, rng);
    return p;
  }

  /// Level-1 features from the image, then pooled over the frame's grids.
  std::vector<Matrix<S>> frame_features(const ParamStore<S>& p, const Image& image, const FrameGeometry& frame,
                                        typename ToyEncoder<S>::Cache* cache) const {
    return pool_pyramid(encoder_.forward(p, image, cache), frame.levels);
  }

  std::vector<Matrix<S>> frame_features(const Matrix<S>& external, const FrameGeometry& frame) const {
    const CloudGrid& g = frame.levels.front();
    return pool_pyramid(ingest_external_features(external, g.width, g.height, config_.attention.channels),
                        frame.levels);
  }

  /// Support bags [level][q] around each query in its own frame.
  std::vector<std::vector<Bag>> support_bags(std::span<const Query> queries,
                                             const std::vector<FrameGeometry>& frames) const {
    std::vector<int> qf;
    std::vector<Vec3> qp;
    for (const auto& q : queries) {
      qf.push_back(q.frame);
      qp.push_back(q.position);
    }
    std::vector<std::vector<Bag>> out;
    for (int l = 0; l < config_.levels; ++l)
      out.push_back(build_support_bags(qf, qp, frames, config_.neighbors, l));
    return out;
  }

  /// Neighborhood features N for every (q, t) at the current estimates.
  Matrix<S> neighborhood(const ParamStore<S>& p, const WindowContext<S>& ctx,
                         const std::vector<std::vector<Bag>>& support, const TrajectoryState& state,
                         IterationCache* cache) const {
    std::vector<PooledPair<S>> pooled;
    if (cache) {
      cache->context.assign(config_.levels, {});
      cache->levels.assign(config_.levels, {});
    }
    for (int l = 0; l < config_.levels; ++l) {
      std::vector<Bag> context = build_context_bags(state.positions, ctx.slot_frames, *ctx.frames, config_.neighbors, l);
      const BagBatch<S> batch = gather_bags(support[l], context, state.timesteps, ctx.level_features(l));
      pooled.push_back(attention_.forward_level(p, batch, cache ? &cache->levels[l] : nullptr));
      if (cache) cache->context[l] = std::move(context);
    }
    return fuse_and_concat(pooled);
  }

  /// One refinement step: returns the raw [Q*T, 4] update.
  Matrix<S> iterate(const ParamStore<S>& p, const WindowContext<S>& ctx, const std::vector<std::vector<Bag>>& support,
                    const TrajectoryState& state, IterationCache* cache) const {
    const Matrix<S> n = neighborhood(p, ctx, support, state, cache);
    const std::vector<FrameCamera> cameras = ctx.slot_cameras();
    const Matrix<S> tokens = assemble_tokens(state, n, cameras, layout_);
    return refiner_.forward(p, tokens, state.queries, state.timesteps, cache ? &cache->refiner : nullptr);
  }

  /// Backpropagates d(update) into parameters and per-frame feature grads.
  void iterate_backward(ParamStore<S>& p, const std::vector<std::vector<Bag>>& support, const IterationCache& c,
                        const Matrix<S>& dupdate, FeatureGradients<S>& dfeatures) const {
    const Matrix<S> dtokens = refiner_.backward(p, c.refiner, dupdate);
    const Matrix<S> dn = assemble_tokens_backward(dtokens, layout_);
    const Eigen::Index C = config_.attention.channels;
    for (int l = 0; l < config_.levels; ++l) {
      auto g = attention_.backward_level(p, c.levels[l], dn.middleCols(l * C, C));
      std::vector<Matrix<S>*> grads;
      for (auto& f : dfeatures) grads.push_back(&f[l]);
      scatter_bag_grads(support[l], g.dsupport_features, grads);
      scatter_bag_grads(c.context[l], g.dcontext_features, grads);
    }
  }

  /// M iterations of additive refinement. `history` receives the state after
  /// every iteration.
  TrajectoryState refine(const ParamStore<S>& p, const WindowContext<S>& ctx,
                         const std::vector<std::vector<Bag>>& support, TrajectoryState state, int iterations,
                         std::vector<TrajectoryState>* history = nullptr) const {
    for (int m = 0; m < iterations; ++m) {
      apply_update(state, split_update<S>(iterate(p, ctx, support, state, nullptr)));
      if (!state.positions.allFinite() || !state.logits.allFinite())
        fail(ErrorCode::kDivergence, "non-finite trajectory after iteration " + std::to_string(m + 1));
      if (history) history->push_back(state);
    }
    return state;
  }

 private:
  ModelConfig config_;
  ToyEncoder<S> encoder_;
  NeighborhoodAttention<S> attention_;
  TokenLayout layout_;
  Refiner<S> refiner_;
};

}  // namespace tapip3d
