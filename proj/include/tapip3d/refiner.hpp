#pragma once

#include <Eigen/Core>

#include <string>
#include <utility>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/nn.hpp"
#include "tapip3d/tensor.hpp"
#include "tapip3d/trajectory.hpp"

namespace tapip3d {

struct RefinerConfig {
  int layers = 3;
  int heads = 4;
  int width = 256;
  int virtual_tracks = 16;
  int iterations = 4;
  int mlp_ratio = 4;
  int time_bands = 8;

  void validate() const {
    require(layers >= 1 && heads >= 1 && width >= 1 && virtual_tracks >= 0 && iterations >= 1 && mlp_ratio >= 1,
            ErrorCode::kConfig, "refiner sizes must be positive (V may be 0)");
    require(width % heads == 0, ErrorCode::kConfig, "refiner width must be divisible by heads");
  }
};

/// Rows ordered (n, t) -> rows ordered (t, n).
template <typename S>
Matrix<S> to_time_major(const Matrix<S>& x, Eigen::Index n, Eigen::Index t) {
  Matrix<S> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < t; ++j) out.row(j * n + i) = x.row(i * t + j);
  return out;
}

/// Rows ordered (t, n) -> rows ordered (n, t).
template <typename S>
Matrix<S> to_track_major(const Matrix<S>& x, Eigen::Index n, Eigen::Index t) {
  Matrix<S> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < t; ++j) out.row(i * t + j) = x.row(j * n + i);
  return out;
}

/// Temporal self-attention over each track (real and virtual), then spatial
/// mixing through the virtual tracks only, then an MLP. Pre-norm residual.
template <typename S>
struct RefinerBlock {
  nn::LayerNorm<S> ln_time, ln_real, ln_virtual, ln_virtual_self, ln_virtual_out, ln_mlp;
  nn::MultiHeadAttention<S> time_attn, virtual_from_real, virtual_self, real_from_virtual;
  nn::Mlp<S> mlp;

  struct Cache {
    Eigen::Index real = 0, virt = 0, steps = 0;
    typename nn::LayerNorm<S>::Cache ln_time, ln_real, ln_virtual, ln_virtual_self, ln_virtual_out, ln_mlp;
    typename nn::MultiHeadAttention<S>::Cache time_attn, virtual_from_real, virtual_self, real_from_virtual;
    typename nn::Mlp<S>::Cache mlp;
  };

  RefinerBlock() = default;
  RefinerBlock(const std::string& name, Eigen::Index width, Eigen::Index heads, Eigen::Index mlp_ratio)
      : ln_time(name + ".ln_time", width),
        ln_real(name + ".ln_real", width),
        ln_virtual(name + ".ln_virtual", width),
        ln_virtual_self(name + ".ln_virtual_self", width),
        ln_virtual_out(name + ".ln_virtual_out", width),
        ln_mlp(name + ".ln_mlp", width),
        time_attn(name + ".time_attn", width, width, width, width, heads),
        virtual_from_real(name + ".virtual_from_real", width, width, width, width, heads),
        virtual_self(name + ".virtual_self", width, width, width, width, heads),
        real_from_virtual(name + ".real_from_virtual", width, width, width, width, heads),
        mlp(name + ".mlp", width, mlp_ratio * width, width) {}

  void declare(ParamStore<S>& p, Rng& rng) const {
    for (const auto* ln : {&ln_time, &ln_real, &ln_virtual, &ln_virtual_self, &ln_virtual_out, &ln_mlp})
      ln->declare(p, rng);
    for (const auto* a : {&time_attn, &virtual_from_real, &virtual_self, &real_from_virtual}) a->declare(p, rng);
    mlp.declare(p, rng);
  }

  /// `z` stacks real tracks then virtual tracks, each in (track, t) row order.
  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& z, Eigen::Index real, Eigen::Index virt,
                    Eigen::Index steps, Cache& c) const {
    c.real = real;
    c.virt = virt;
    c.steps = steps;
    const Matrix<S> a = ln_time.forward(p, z, &c.ln_time);
    Matrix<S> z1 = z + time_attn.forward(p, a, a, real + virt, nullptr, &c.time_attn);
    if (virt > 0) {
      const Matrix<S> xt = to_time_major<S>(z1.topRows(real * steps), real, steps);
      const Matrix<S> vt = to_time_major<S>(z1.bottomRows(virt * steps), virt, steps);
      const Matrix<S> ax = ln_real.forward(p, xt, &c.ln_real);
      const Matrix<S> av = ln_virtual.forward(p, vt, &c.ln_virtual);
      const Matrix<S> v2 = vt + virtual_from_real.forward(p, av, ax, steps, nullptr, &c.virtual_from_real);
      const Matrix<S> bv = ln_virtual_self.forward(p, v2, &c.ln_virtual_self);
      const Matrix<S> v3 = v2 + virtual_self.forward(p, bv, bv, steps, nullptr, &c.virtual_self);
      const Matrix<S> cv = ln_virtual_out.forward(p, v3, &c.ln_virtual_out);
      const Matrix<S> x2 = xt + real_from_virtual.forward(p, ax, cv, steps, nullptr, &c.real_from_virtual);
      z1.topRows(real * steps) = to_track_major<S>(x2, real, steps);
      z1.bottomRows(virt * steps) = to_track_major<S>(v3, virt, steps);
    }
    return z1 + mlp.forward(p, ln_mlp.forward(p, z1, &c.ln_mlp), &c.mlp);
  }

  Matrix<S> backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dz3) const {
    const Eigen::Index real = c.real, virt = c.virt, steps = c.steps;
    Matrix<S> dz1 = dz3 + ln_mlp.backward(p, c.ln_mlp, mlp.backward(p, c.mlp, dz3));
    if (virt > 0) {
      Matrix<S> dxt = to_time_major<S>(dz1.topRows(real * steps), real, steps);
      Matrix<S> dv3 = to_time_major<S>(dz1.bottomRows(virt * steps), virt, steps);
      auto g_rv = real_from_virtual.backward(p, c.real_from_virtual, dxt);
      Matrix<S> dax = std::move(g_rv.dxq);
      dv3 += ln_virtual_out.backward(p, c.ln_virtual_out, g_rv.dxkv);
      auto g_vv = virtual_self.backward(p, c.virtual_self, dv3);
      const Matrix<S> dv2 = dv3 + ln_virtual_self.backward(p, c.ln_virtual_self, g_vv.dxq + g_vv.dxkv);
      auto g_vr = virtual_from_real.backward(p, c.virtual_from_real, dv2);
      const Matrix<S> dvt = dv2 + ln_virtual.backward(p, c.ln_virtual, g_vr.dxq);
      dax += g_vr.dxkv;
      dxt += ln_real.backward(p, c.ln_real, dax);
      dz1.topRows(real * steps) = to_track_major<S>(dxt, real, steps);
      dz1.bottomRows(virt * steps) = to_track_major<S>(dvt, virt, steps);
    }
    auto g_t = time_attn.backward(p, c.time_attn, dz1);
    return dz1 + ln_time.backward(p, c.ln_time, g_t.dxq + g_t.dxkv);
  }
};

/// Maps [Q*T, D] trajectory tokens to [Q*T, 4] updates (dx, dy, dz, dlogit).
template <typename S>
class Refiner {
 public:
  struct Cache {
    Eigen::Index queries = 0, steps = 0;
    Matrix<S> tokens;
    Matrix<double> virtual_time_in;
    Matrix<S> virtual_time_pe;
    std::vector<typename RefinerBlock<S>::Cache> blocks;
    typename nn::LayerNorm<S>::Cache ln_out;
    Matrix<S> head_in;
  };

  Refiner() = default;
  Refiner(RefinerConfig config, Eigen::Index token_width) : config_(config), token_width_(token_width) {
    config.validate();
    const Eigen::Index W = config.width;
    input_ = nn::Linear<S>("refiner.input", token_width, W);
    virtual_time_ = nn::Linear<S>("refiner.virtual_time", 2 * config.time_bands, W);
    for (int l = 0; l < config.layers; ++l)
      blocks_.emplace_back("refiner.block" + std::to_string(l), W, config.heads, config.mlp_ratio);
    ln_out_ = nn::LayerNorm<S>("refiner.ln_out", W);
    head_ = nn::Linear<S>("refiner.head", W, 4, true, Init::kZeros);
  }

  const RefinerConfig& config() const { return config_; }
  Eigen::Index token_width() const { return token_width_; }
  static constexpr const char* kVirtualName = "refiner.virtual";

  void declare(ParamStore<S>& p, Rng& rng) const {
    input_.declare(p, rng);
    if (config_.virtual_tracks > 0) {
      initialize(p.declare(kVirtualName, {std::size_t(config_.virtual_tracks), std::size_t(config_.width)}),
                 Init::kTruncatedNormal, rng, 1.0);
      virtual_time_.declare(p, rng);
    }
    for (const auto& b : blocks_) b.declare(p, rng);
    ln_out_.declare(p, rng);
    head_.declare(p, rng);
  }

  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& tokens, Eigen::Index queries, Eigen::Index steps,
                    Cache* cache) const {
    if (tokens.rows() != queries * steps || tokens.cols() != token_width_)
      fail(ErrorCode::kShape, "refiner tokens " + shape_string(tokens.rows(), tokens.cols()) + " vs " +
                                  shape_string(queries * steps, token_width_));
    Cache local;
    Cache& c = cache ? *cache : local;
    c.queries = queries;
    c.steps = steps;
    c.tokens = tokens;
    const Eigen::Index V = config_.virtual_tracks, W = config_.width;
    Matrix<S> z(queries * steps + V * steps, W);
    z.topRows(queries * steps) = input_.forward(p, tokens);
    if (V > 0) {
      c.virtual_time_in.resize(steps, 1);
      for (Eigen::Index t = 0; t < steps; ++t) c.virtual_time_in(t, 0) = double(t) / double(steps);
      c.virtual_time_pe = nn::FourierEncoding{config_.time_bands, 1.0}.encode<S>(c.virtual_time_in);
      const Matrix<S> time = virtual_time_.forward(p, c.virtual_time_pe);
      const auto virt = p.value(kVirtualName);
      for (Eigen::Index v = 0; v < V; ++v)
        for (Eigen::Index t = 0; t < steps; ++t) z.row(queries * steps + v * steps + t) = virt.row(v) + time.row(t);
    }
    c.blocks.assign(blocks_.size(), {});
    for (std::size_t i = 0; i < blocks_.size(); ++i) z = blocks_[i].forward(p, z, queries, V, steps, c.blocks[i]);
    c.head_in = ln_out_.forward(p, z.topRows(queries * steps), &c.ln_out);
    return head_.forward(p, c.head_in);
  }

  /// Returns d(tokens).
  Matrix<S> backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dout) const {
    const Eigen::Index Q = c.queries, T = c.steps, V = config_.virtual_tracks;
    Matrix<S> dz = Matrix<S>::Zero((Q + V) * T, config_.width);
    dz.topRows(Q * T) = ln_out_.backward(p, c.ln_out, head_.backward(p, c.head_in, dout));
    for (std::size_t i = blocks_.size(); i-- > 0;) dz = blocks_[i].backward(p, c.blocks[i], dz);
    if (V > 0) {
      auto dvirt = p.grad(kVirtualName);
      Matrix<S> dtime = Matrix<S>::Zero(T, config_.width);
      for (Eigen::Index v = 0; v < V; ++v) {
        for (Eigen::Index t = 0; t < T; ++t) {
          dvirt.row(v) += dz.row(Q * T + v * T + t);
          dtime.row(t) += dz.row(Q * T + v * T + t);
        }
      }
      virtual_time_.backward(p, c.virtual_time_pe, dtime);
    }
    return input_.backward(p, c.tokens, dz.topRows(Q * T));
  }

 private:
  RefinerConfig config_;
  Eigen::Index token_width_ = 0;
  nn::Linear<S> input_, virtual_time_;
  std::vector<RefinerBlock<S>> blocks_;
  nn::LayerNorm<S> ln_out_;
  nn::Linear<S> head_;
};

/// One refinement step's additive updates, split out of the refiner output.
struct UpdateDelta {
  Matrix<double> positions;  // [Q*T, 3]
  Eigen::VectorXd logits;    // [Q*T]
};

template <typename S>
UpdateDelta split_update(const Matrix<S>& out) {
  UpdateDelta d;
  d.positions = out.leftCols(3).template cast<double>();
  d.logits = out.col(3).template cast<double>();
  return d;
}

inline void apply_update(TrajectoryState& state, const UpdateDelta& d) {
  state.positions += d.positions;
  state.logits += d.logits;
  ++state.iteration;
}

}  // namespace tapip3d
