#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/feature_cloud.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/knn_index.hpp"
#include "tapip3d/nn.hpp"
#include "tapip3d/tensor.hpp"

namespace tapip3d {

/// Maps normalized tracking-space points of one frame back to that frame's
/// camera: undo the scale, leave the active space, project.
struct FrameCamera {
  CameraIntrinsics intrinsics;
  std::optional<RigidTransform> pose;  // camera-to-world
  CoordinateSystem mode = CoordinateSystem::kXYZCamera;
  double sigma = 1.0;

  Vec3 unscale(const Vec3& scaled) const { return scaled * sigma; }

  Vec3 camera_point(const Vec3& scaled) const {
    return convert_coords(unscale(scaled), mode, CoordinateSystem::kXYZCamera, intrinsics, pose);
  }

  /// Pixel coordinates of a normalized point. Points on or behind the camera
  /// plane still get (possibly far out-of-image) coordinates.
  Vec2 pixel(const Vec3& scaled) const {
    const Vec3 p = unscale(scaled);
    if (is_image_space(mode)) return {p.x(), p.y()};
    Vec3 cam = mode == CoordinateSystem::kXYZWorld ? to_camera(p, pose.value()) : p;
    if (std::abs(cam.z()) < 1e-9) cam.z() = std::signbit(cam.z()) ? -1e-9 : 1e-9;
    return project(cam, intrinsics).uv;
  }
};

/// Geometry of one frame's feature cloud: per-level grids (normalized
/// coordinates), their indices, and the camera.
struct FrameGeometry {
  std::vector<CloudGrid> levels;
  std::vector<SpatialIndex> indices;
  FrameCamera camera;

  FrameGeometry() = default;
  FrameGeometry(std::vector<CloudGrid> grids, FrameCamera cam) : levels(std::move(grids)), camera(std::move(cam)) {
    indices.reserve(levels.size());
    for (const auto& g : levels) indices.emplace_back(g);
  }
};

enum class NeighborMode { kKnn3D, kFixed2D };
enum class AttentionMode { kN2N, kP2N };

inline std::string_view to_string(NeighborMode m) { return m == NeighborMode::kKnn3D ? "knn3d" : "fixed2d"; }
inline std::string_view to_string(AttentionMode m) { return m == AttentionMode::kN2N ? "n2n" : "p2n"; }

inline NeighborMode parse_neighbor_mode(std::string_view s) {
  if (s == "knn3d") return NeighborMode::kKnn3D;
  if (s == "fixed2d") return NeighborMode::kFixed2D;
  fail(ErrorCode::kConfig, "unknown neighbor mode '" + std::string(s) + "'");
}
inline AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "n2n") return AttentionMode::kN2N;
  if (s == "p2n") return AttentionMode::kP2N;
  fail(ErrorCode::kConfig, "unknown attention mode '" + std::string(s) + "'");
}

struct NeighborConfig {
  NeighborMode mode = NeighborMode::kKnn3D;
  int k = 32;
  int window_radius = 2;

  int bag_size() const { return mode == NeighborMode::kKnn3D ? k : (2 * window_radius + 1) * (2 * window_radius + 1); }
};

/// A support or context bag: neighbors of a point in one frame's cloud.
struct Bag {
  int frame = 0;
  NeighborSet neighbors;
};

inline NeighborSet find_neighbors(const FrameGeometry& frame, int level, const Vec3& point,
                                  const NeighborConfig& config) {
  require(level >= 0 && level < static_cast<int>(frame.levels.size()), ErrorCode::kConfig, "level out of range");
  if (config.mode == NeighborMode::kKnn3D) return frame.indices[level].query(point, config.k);
  return fixed_2d_neighbors(frame.levels[level], frame.indices[level], point, frame.camera.pixel(point),
                            config.window_radius);
}

/// K neighbors around each query in its own frame.
inline std::vector<Bag> build_support_bags(std::span<const int> query_frames, std::span<const Vec3> positions,
                                           std::span<const FrameGeometry> frames, const NeighborConfig& config,
                                           int level) {
  require(query_frames.size() == positions.size(), ErrorCode::kShape, "query frames/positions mismatch");
  std::vector<Bag> out;
  out.reserve(positions.size());
  for (std::size_t q = 0; q < positions.size(); ++q) {
    const int f = query_frames[q];
    require(f >= 0 && f < static_cast<int>(frames.size()), ErrorCode::kConfig, "query frame outside the video");
    out.push_back({f, find_neighbors(frames[f], level, positions[q], config)});
  }
  return out;
}

/// One bag per (query, window slot) around the current estimate; `positions`
/// is [Q*T, 3] in (q, t) order and `slot_frames[t]` names the frame of slot t.
inline std::vector<Bag> build_context_bags(const Matrix<double>& positions, std::span<const int> slot_frames,
                                           std::span<const FrameGeometry> frames, const NeighborConfig& config,
                                           int level) {
  const auto T = static_cast<Eigen::Index>(slot_frames.size());
  require(T > 0 && positions.rows() % T == 0 && positions.cols() == 3, ErrorCode::kShape,
          "trajectory " + shape_string(positions.rows(), positions.cols()) + " vs window of " + std::to_string(T));
  const Eigen::Index Q = positions.rows() / T;
  std::vector<Bag> out;
  out.reserve(static_cast<std::size_t>(Q * T));
  for (Eigen::Index q = 0; q < Q; ++q) {
    for (Eigen::Index t = 0; t < T; ++t) {
      const Vec3 p = positions.row(q * T + t).transpose();
      require(p.allFinite(), ErrorCode::kAssembly, "non-finite trajectory estimate");
      const int f = slot_frames[t];
      out.push_back({f, find_neighbors(frames[f], level, p, config)});
    }
  }
  return out;
}

/// Gathered tokens for one pyramid level, ready for batched attention.
template <typename S>
struct BagBatch {
  Matrix<S> support_features;        // [Q*Ks, C]
  Matrix<double> support_offsets;    // [Q*Ks, 3]
  Matrix<S> context_features;        // [Q*T*Kc, C]
  Matrix<double> context_offsets;    // [Q*T*Kc, 3]
  Eigen::Index queries = 0;
  Eigen::Index timesteps = 0;
  Eigen::Index support_size = 0;
  Eigen::Index context_size = 0;
};

/// `features[f]` is the level's feature matrix of frame f.
template <typename S>
BagBatch<S> gather_bags(const std::vector<Bag>& support, const std::vector<Bag>& context, Eigen::Index timesteps,
                        const std::vector<const Matrix<S>*>& features) {
  require(!support.empty() && context.size() == support.size() * static_cast<std::size_t>(timesteps),
          ErrorCode::kShape, "bag counts do not match Q and T");
  BagBatch<S> b;
  b.queries = static_cast<Eigen::Index>(support.size());
  b.timesteps = timesteps;
  b.support_size = static_cast<Eigen::Index>(support[0].neighbors.size());
  b.context_size = static_cast<Eigen::Index>(context[0].neighbors.size());
  const Eigen::Index C = features.at(support[0].frame)->cols();
  auto fill = [&](const std::vector<Bag>& bags, Eigen::Index k, Matrix<S>& feats, Matrix<double>& offs) {
    feats.resize(static_cast<Eigen::Index>(bags.size()) * k, C);
    offs.resize(feats.rows(), 3);
    for (std::size_t i = 0; i < bags.size(); ++i) {
      const auto& n = bags[i].neighbors;
      require(static_cast<Eigen::Index>(n.size()) == k, ErrorCode::kShape, "bags of unequal size");
      const Matrix<S>& src = *features.at(bags[i].frame);
      for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index row = static_cast<Eigen::Index>(i) * k + j;
        feats.row(row) = src.row(n.ids[j]);
        offs.row(row) = n.offsets[j].transpose();
      }
    }
  };
  fill(support, b.support_size, b.support_features, b.support_offsets);
  fill(context, b.context_size, b.context_features, b.context_offsets);
  return b;
}

/// Scatter-adds gathered-token cotangents back onto per-frame feature grads.
template <typename S>
void scatter_bag_grads(const std::vector<Bag>& bags, const Matrix<S>& dtokens, std::vector<Matrix<S>*>& grads) {
  if (bags.empty()) return;
  const auto k = static_cast<Eigen::Index>(bags[0].neighbors.size());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    Matrix<S>& g = *grads.at(bags[i].frame);
    for (Eigen::Index j = 0; j < k; ++j)
      g.row(bags[i].neighbors.ids[j]) += dtokens.row(static_cast<Eigen::Index>(i) * k + j);
  }
}

struct N2NConfig {
  int channels = 64;
  int heads = 4;
  int blocks = 1;
  int mlp_ratio = 2;
  int fourier_bands = 8;
  bool offset_bias = false;  // offsets additionally bias attention logits
  AttentionMode mode = AttentionMode::kN2N;
};

/// Bi-directional cross-attention between paired support/context bags, each
/// direction followed by an MLP, pre-norm residual.
template <typename S>
struct N2NBlock {
  nn::LayerNorm<S> ln_s1, ln_c1, ln_s2, ln_c2;
  nn::MultiHeadAttention<S> support_from_context, context_from_support;
  nn::Mlp<S> mlp_s, mlp_c;

  struct Cache {
    typename nn::LayerNorm<S>::Cache ln_s1, ln_c1, ln_s2, ln_c2;
    typename nn::MultiHeadAttention<S>::Cache s_from_c, c_from_s;
    typename nn::Mlp<S>::Cache mlp_s, mlp_c;
  };

  N2NBlock() = default;
  N2NBlock(const std::string& name, Eigen::Index channels, Eigen::Index heads, Eigen::Index mlp_ratio)
      : ln_s1(name + ".ln_s1", channels),
        ln_c1(name + ".ln_c1", channels),
        ln_s2(name + ".ln_s2", channels),
        ln_c2(name + ".ln_c2", channels),
        support_from_context(name + ".s_from_c", channels, channels, channels, channels, heads),
        context_from_support(name + ".c_from_s", channels, channels, channels, channels, heads),
        mlp_s(name + ".mlp_s", channels, mlp_ratio * channels, channels),
        mlp_c(name + ".mlp_c", channels, mlp_ratio * channels, channels) {}

  void declare(ParamStore<S>& p, Rng& rng) const {
    ln_s1.declare(p, rng);
    ln_c1.declare(p, rng);
    support_from_context.declare(p, rng);
    context_from_support.declare(p, rng);
    ln_s2.declare(p, rng);
    ln_c2.declare(p, rng);
    mlp_s.declare(p, rng);
    mlp_c.declare(p, rng);
  }

  /// `support` is [G*Ks, C], `context` is [G*Kc, C]; bag g of one attends to
  /// bag g of the other. Biases (optional) are per-key logit offsets.
  std::pair<Matrix<S>, Matrix<S>> forward(const ParamStore<S>& p, const Matrix<S>& support, const Matrix<S>& context,
                                          Eigen::Index groups, const Matrix<S>* context_bias,
                                          const Matrix<S>* support_bias, Cache* cache) const {
    if (support.cols() != context.cols())
      fail(ErrorCode::kShape, "n2n block: support " + shape_string(support.rows(), support.cols()) + " vs context " +
                                  shape_string(context.rows(), context.cols()));
    Cache local;
    Cache& c = cache ? *cache : local;
    const Matrix<S> a_s = ln_s1.forward(p, support, &c.ln_s1);
    const Matrix<S> a_c = ln_c1.forward(p, context, &c.ln_c1);
    Matrix<S> s1 = support + support_from_context.forward(p, a_s, a_c, groups, context_bias, cache ? &c.s_from_c : nullptr);
    Matrix<S> c1 = context + context_from_support.forward(p, a_c, a_s, groups, support_bias, cache ? &c.c_from_s : nullptr);
    Matrix<S> s2 = s1 + mlp_s.forward(p, ln_s2.forward(p, s1, &c.ln_s2), cache ? &c.mlp_s : nullptr);
    Matrix<S> c2 = c1 + mlp_c.forward(p, ln_c2.forward(p, c1, &c.ln_c2), cache ? &c.mlp_c : nullptr);
    return {std::move(s2), std::move(c2)};
  }

  struct Grads {
    Matrix<S> dsupport, dcontext, dcontext_bias, dsupport_bias;
  };

  Grads backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dsupport_out, const Matrix<S>& dcontext_out) const {
    const Matrix<S> ds1 = dsupport_out + ln_s2.backward(p, c.ln_s2, mlp_s.backward(p, c.mlp_s, dsupport_out));
    const Matrix<S> dc1 = dcontext_out + ln_c2.backward(p, c.ln_c2, mlp_c.backward(p, c.mlp_c, dcontext_out));
    auto g_s = support_from_context.backward(p, c.s_from_c, ds1);
    auto g_c = context_from_support.backward(p, c.c_from_s, dc1);
    Grads out;
    out.dsupport = ds1 + ln_s1.backward(p, c.ln_s1, g_s.dxq + g_c.dxkv);
    out.dcontext = dc1 + ln_c1.backward(p, c.ln_c1, g_s.dxkv + g_c.dxq);
    out.dcontext_bias = std::move(g_s.dbias);
    out.dsupport_bias = std::move(g_c.dbias);
    return out;
  }
};

/// Compresses each bag to one token: a learned free token (or a supplied
/// per-bag query) cross-attends to the normalized bag.
template <typename S>
struct AttentionPool {
  std::string token_name;
  nn::LayerNorm<S> ln;
  nn::MultiHeadAttention<S> attn;
  Eigen::Index channels = 0;

  struct Cache {
    typename nn::LayerNorm<S>::Cache ln;
    typename nn::MultiHeadAttention<S>::Cache attn;
    bool learned_query = true;
  };

  AttentionPool() = default;
  AttentionPool(const std::string& name, Eigen::Index channels_, Eigen::Index heads)
      : token_name(name + ".token"),
        ln(name + ".ln", channels_),
        attn(name + ".attn", channels_, channels_, channels_, channels_, heads),
        channels(channels_) {}

  void declare(ParamStore<S>& p, Rng& rng) const {
    initialize(p.declare(token_name, {1, static_cast<std::size_t>(channels)}), Init::kTruncatedNormal, rng, 1.0);
    ln.declare(p, rng);
    attn.declare(p, rng);
  }

  Matrix<S> learned_queries(const ParamStore<S>& p, Eigen::Index groups) const {
    return p.value(token_name).replicate(groups, 1);
  }

  /// `bag` is [G*K, C]; `query` (optional) is [G, C] and replaces the learned token.
  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& bag, Eigen::Index groups, const Matrix<S>* query,
                    Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.learned_query = query == nullptr;
    const Matrix<S> keys = ln.forward(p, bag, &c.ln);
    if (query) return attn.forward(p, *query, keys, groups, nullptr, cache ? &c.attn : nullptr);
    return attn.forward(p, learned_queries(p, groups), keys, groups, nullptr, cache ? &c.attn : nullptr);
  }

  /// Returns d(bag); d(query) is written to `dquery` for supplied queries and
  /// accumulated onto the learned token otherwise.
  Matrix<S> backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dout, Matrix<S>* dquery) const {
    auto g = attn.backward(p, c.attn, dout);
    if (c.learned_query) {
      p.grad(token_name) += g.dxq.colwise().sum();
    } else if (dquery) {
      *dquery = std::move(g.dxq);
    }
    return ln.backward(p, c.ln, g.dxkv);
  }
};

/// Pooled summaries of one level: support + context for N2N; context only
/// (support left empty) for the point-to-neighborhood baseline.
template <typename S>
struct PooledPair {
  Matrix<S> support;
  Matrix<S> context;
};

/// Per level: elementwise sum of the two summaries; then concatenation over
/// levels in order.
template <typename S>
Matrix<S> fuse_and_concat(const std::vector<PooledPair<S>>& levels) {
  require(!levels.empty(), ErrorCode::kInternal, "no levels to fuse");
  const Eigen::Index rows = levels[0].context.rows();
  const Eigen::Index width = levels[0].context.cols();
  Matrix<S> out(rows, width * static_cast<Eigen::Index>(levels.size()));
  for (std::size_t l = 0; l < levels.size(); ++l) {
    require(levels[l].context.rows() == rows && levels[l].context.cols() == width, ErrorCode::kInternal,
            "missing or mis-shaped level " + std::to_string(l));
    auto block = out.middleCols(static_cast<Eigen::Index>(l) * width, width);
    block = levels[l].context;
    if (levels[l].support.size() != 0) block += levels[l].support;
  }
  return out;
}

struct TokenCounts {
  Eigen::Index support = 0;
  Eigen::Index context = 0;
  Eigen::Index pooled = 0;
  Eigen::Index fused = 0;
};

/// Neighborhood contextualization of every (query, timestep) at one level.
template <typename S>
class NeighborhoodAttention {
 public:
  struct LevelCache {
    Eigen::Index queries = 0, timesteps = 0, support_size = 0, context_size = 0;
    Matrix<S> support_pe_in, context_pe_in;
    Matrix<S> support_bias_q, context_bias;  // [Q*Ks, H], [Q*T*Kc, H]
    Matrix<S> support_bias;                  // replicated per timestep
    std::vector<typename N2NBlock<S>::Cache> blocks;
    typename AttentionPool<S>::Cache pool_s, pool_c;
    Matrix<S> query_tokens;  // p2n only
    TokenCounts counts;
  };

  NeighborhoodAttention() = default;
  explicit NeighborhoodAttention(N2NConfig config) : config_(config), fourier_{config.fourier_bands, 1.0} {
    const Eigen::Index C = config.channels;
    const Eigen::Index pe = fourier_.width(3);
    support_pe_ = nn::Linear<S>("n2n.support_pe", pe, C);
    context_pe_ = nn::Linear<S>("n2n.context_pe", pe, C);
    support_bias_ = nn::Linear<S>("n2n.support_bias", pe, config.heads);
    context_bias_ = nn::Linear<S>("n2n.context_bias", pe, config.heads);
    for (int b = 0; b < config.blocks; ++b)
      blocks_.emplace_back("n2n.block" + std::to_string(b), C, config.heads, config.mlp_ratio);
    pool_s_ = AttentionPool<S>("n2n.pool_s", C, config.heads);
    pool_c_ = AttentionPool<S>("n2n.pool_c", C, config.heads);
  }

  const N2NConfig& config() const { return config_; }
  const nn::FourierEncoding& fourier() const { return fourier_; }
  const AttentionPool<S>& support_pool() const { return pool_s_; }
  const AttentionPool<S>& context_pool() const { return pool_c_; }
  const std::vector<N2NBlock<S>>& blocks() const { return blocks_; }

  void declare(ParamStore<S>& p, Rng& rng) const {
    support_pe_.declare(p, rng);
    context_pe_.declare(p, rng);
    support_bias_.declare(p, rng);
    context_bias_.declare(p, rng);
    for (const auto& b : blocks_) b.declare(p, rng);
    pool_s_.declare(p, rng);
    pool_c_.declare(p, rng);
  }

  /// Token embedding: neighbor feature + projected Fourier encoding of its offset.
  Matrix<S> embed_support(const ParamStore<S>& p, const Matrix<S>& features, const Matrix<double>& offsets,
                          Matrix<S>* pe_in) const {
    Matrix<S> pe = fourier_.encode<S>(offsets);
    Matrix<S> out = features + support_pe_.forward(p, pe);
    if (pe_in) *pe_in = std::move(pe);
    return out;
  }
  Matrix<S> embed_context(const ParamStore<S>& p, const Matrix<S>& features, const Matrix<double>& offsets,
                          Matrix<S>* pe_in) const {
    Matrix<S> pe = fourier_.encode<S>(offsets);
    Matrix<S> out = features + context_pe_.forward(p, pe);
    if (pe_in) *pe_in = std::move(pe);
    return out;
  }

  PooledPair<S> forward_level(const ParamStore<S>& p, const BagBatch<S>& b, LevelCache* cache) const {
    LevelCache local;
    LevelCache& c = cache ? *cache : local;
    const Eigen::Index Q = b.queries, T = b.timesteps, Ks = b.support_size, Kc = b.context_size;
    const Eigen::Index groups = Q * T;
    c.queries = Q;
    c.timesteps = T;
    c.support_size = Ks;
    c.context_size = Kc;
    const Matrix<S> support_q = embed_support(p, b.support_features, b.support_offsets, &c.support_pe_in);
    Matrix<S> context = embed_context(p, b.context_features, b.context_offsets, &c.context_pe_in);
    c.counts = {Q * Ks, Q * T * Kc, (config_.mode == AttentionMode::kN2N ? 2 : 1) * groups, groups};

    PooledPair<S> out;
    if (config_.mode == AttentionMode::kP2N) {
      c.query_tokens.resize(groups, support_q.cols());
      for (Eigen::Index q = 0; q < Q; ++q)
        for (Eigen::Index t = 0; t < T; ++t) c.query_tokens.row(q * T + t) = support_q.row(q * Ks);
      out.context = pool_c_.forward(p, context, groups, &c.query_tokens, &c.pool_c);
      if (!cache) c = {};
      return out;
    }

    Matrix<S> support = replicate_support(support_q, Q, T, Ks);
    const bool bias = config_.offset_bias;
    if (bias) {
      c.support_bias_q = support_bias_.forward(p, c.support_pe_in);
      c.support_bias = replicate_support(c.support_bias_q, Q, T, Ks);
      c.context_bias = context_bias_.forward(p, c.context_pe_in);
    }
    c.blocks.assign(blocks_.size(), {});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto [s, x] = blocks_[i].forward(p, support, context, groups, bias ? &c.context_bias : nullptr,
                                       bias ? &c.support_bias : nullptr, &c.blocks[i]);
      support = std::move(s);
      context = std::move(x);
    }
    out.support = pool_s_.forward(p, support, groups, nullptr, &c.pool_s);
    out.context = pool_c_.forward(p, context, groups, nullptr, &c.pool_c);
    if (!cache) c = {};
    return out;
  }

  struct FeatureGrads {
    Matrix<S> dsupport_features;  // [Q*Ks, C]
    Matrix<S> dcontext_features;  // [Q*T*Kc, C]
  };

  /// `dsummary` is the cotangent of the fused (summed) level summary.
  FeatureGrads backward_level(ParamStore<S>& p, const LevelCache& c, const Matrix<S>& dsummary) const {
    const Eigen::Index Q = c.queries, T = c.timesteps, Ks = c.support_size;
    FeatureGrads out;
    if (config_.mode == AttentionMode::kP2N) {
      Matrix<S> dquery;
      out.dcontext_features = pool_c_.backward(p, c.pool_c, dsummary, &dquery);
      Matrix<S> dsupport_q = Matrix<S>::Zero(Q * Ks, dquery.cols());
      for (Eigen::Index q = 0; q < Q; ++q)
        for (Eigen::Index t = 0; t < T; ++t) dsupport_q.row(q * Ks) += dquery.row(q * T + t);
      support_pe_.backward(p, c.support_pe_in, dsupport_q);
      context_pe_.backward(p, c.context_pe_in, out.dcontext_features);
      out.dsupport_features = std::move(dsupport_q);
      return out;
    }
    Matrix<S> dsupport = pool_s_.backward(p, c.pool_s, dsummary, nullptr);
    Matrix<S> dcontext = pool_c_.backward(p, c.pool_c, dsummary, nullptr);
    Matrix<S> dsupport_bias, dcontext_bias;
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      auto g = blocks_[i].backward(p, c.blocks[i], dsupport, dcontext);
      dsupport = std::move(g.dsupport);
      dcontext = std::move(g.dcontext);
      if (config_.offset_bias) {
        if (dsupport_bias.size() == 0) {
          dsupport_bias = std::move(g.dsupport_bias);
          dcontext_bias = std::move(g.dcontext_bias);
        } else {
          dsupport_bias += g.dsupport_bias;
          dcontext_bias += g.dcontext_bias;
        }
      }
    }
    if (config_.offset_bias) {
      support_bias_.backward(p, c.support_pe_in, reduce_support(dsupport_bias, Q, T, Ks));
      context_bias_.backward(p, c.context_pe_in, dcontext_bias);
    }
    Matrix<S> dsupport_q = reduce_support(dsupport, Q, T, Ks);
    support_pe_.backward(p, c.support_pe_in, dsupport_q);
    context_pe_.backward(p, c.context_pe_in, dcontext);
    out.dsupport_features = std::move(dsupport_q);
    out.dcontext_features = std::move(dcontext);
    return out;
  }

  /// Point-to-neighborhood summary: one query token per bag attends to the
  /// context bag through the context pooling weights.
  Matrix<S> point_to_neighborhood(const ParamStore<S>& p, const Matrix<S>& query_tokens, const Matrix<S>& context,
                                  Eigen::Index groups, typename AttentionPool<S>::Cache* cache) const {
    return pool_c_.forward(p, context, groups, &query_tokens, cache);
  }

 private:
  /// (q, k) rows -> (q, t, k) rows.
  static Matrix<S> replicate_support(const Matrix<S>& per_query, Eigen::Index Q, Eigen::Index T, Eigen::Index K) {
    Matrix<S> out(Q * T * K, per_query.cols());
    for (Eigen::Index q = 0; q < Q; ++q)
      for (Eigen::Index t = 0; t < T; ++t) out.middleRows((q * T + t) * K, K) = per_query.middleRows(q * K, K);
    return out;
  }
  static Matrix<S> reduce_support(const Matrix<S>& per_slot, Eigen::Index Q, Eigen::Index T, Eigen::Index K) {
    Matrix<S> out = Matrix<S>::Zero(Q * K, per_slot.cols());
    for (Eigen::Index q = 0; q < Q; ++q)
      for (Eigen::Index t = 0; t < T; ++t) out.middleRows(q * K, K) += per_slot.middleRows((q * T + t) * K, K);
    return out;
  }

  N2NConfig config_;
  nn::FourierEncoding fourier_;
  nn::Linear<S> support_pe_, context_pe_, support_bias_, context_bias_;
  std::vector<N2NBlock<S>> blocks_;
  AttentionPool<S> pool_s_, pool_c_;
};

}  // namespace tapip3d
