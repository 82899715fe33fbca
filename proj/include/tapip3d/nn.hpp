#pragma once

// Small differentiable operator set: every layer exposes forward() and a
// hand-written backward() that accumulates parameter gradients into the
// ParamStore grad slots and returns input cotangents.

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>
#include <utility>

#include "tapip3d/error.hpp"
#include "tapip3d/tensor.hpp"

namespace tapip3d::nn {

namespace detail {

template <typename S>
Eigen::Map<const RowVector<S>> row_view(const Tensor<S>& t) {
  return Eigen::Map<const RowVector<S>>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}
template <typename S>
Eigen::Map<RowVector<S>> row_view(Tensor<S>& t) {
  return Eigen::Map<RowVector<S>>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

inline void check_cols(Eigen::Index got, Eigen::Index want, Eigen::Index rows, const std::string& who) {
  if (got != want)
    fail(ErrorCode::kShape, who + ": input " + shape_string(rows, got) + " but expected [*," +
                                std::to_string(want) + "]");
}

}  // namespace detail

/// sin/cos features at frequencies base * 2^b * pi, b = 0..bands-1.
/// Output layout per row: all sin terms (dimension-major, band-minor), then
/// all cos terms in the same order.
struct FourierEncoding {
  int bands = 8;
  double base_frequency = 1.0;

  Eigen::Index width(Eigen::Index dims) const { return 2 * bands * dims; }

  double frequency(int b) const { return base_frequency * std::ldexp(1.0, b) * M_PI; }

  template <typename S = double>
  Matrix<S> encode(const Matrix<double>& x) const {
    const Eigen::Index dims = x.cols();
    Matrix<S> out(x.rows(), width(dims));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index d = 0; d < dims; ++d) {
        for (int b = 0; b < bands; ++b) {
          const double a = frequency(b) * x(r, d);
          out(r, d * bands + b) = static_cast<S>(std::sin(a));
          out(r, dims * bands + d * bands + b) = static_cast<S>(std::cos(a));
        }
      }
    }
    return out;
  }

  template <typename S = double>
  RowVector<S> encode(std::span<const double> x) const {
    Matrix<double> m(1, static_cast<Eigen::Index>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = x[i];
    return encode<S>(m).row(0);
  }

  /// Cotangent with respect to x given the cotangent of encode(x).
  Matrix<double> backward(const Matrix<double>& x, const Matrix<double>& dy) const {
    const Eigen::Index dims = x.cols();
    Matrix<double> dx = Matrix<double>::Zero(x.rows(), dims);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index d = 0; d < dims; ++d) {
        for (int b = 0; b < bands; ++b) {
          const double f = frequency(b);
          const double a = f * x(r, d);
          dx(r, d) += f * std::cos(a) * dy(r, d * bands + b);
          dx(r, d) -= f * std::sin(a) * dy(r, dims * bands + d * bands + b);
        }
      }
    }
    return dx;
  }
};

/// y = x W^T + b with W stored [out, in].
template <typename S>
struct Linear {
  std::string name;
  Eigen::Index in = 0;
  Eigen::Index out = 0;
  bool bias = true;
  Init weight_init = Init::kTruncatedNormal;
  std::string weight_name;
  std::string bias_name;

  Linear() = default;
  Linear(std::string name_, Eigen::Index in_, Eigen::Index out_, bool bias_ = true,
         Init weight_init_ = Init::kTruncatedNormal)
      : name(std::move(name_)), in(in_), out(out_), bias(bias_), weight_init(weight_init_),
        weight_name(name + ".weight"), bias_name(name + ".bias") {}

  void declare(ParamStore<S>& p, Rng& rng) const {
    initialize(p.declare(weight_name, {static_cast<std::size_t>(out), static_cast<std::size_t>(in)}),
               weight_init, rng);
    if (bias) initialize(p.declare(bias_name, {static_cast<std::size_t>(out)}), Init::kZeros, rng);
  }

  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& x) const {
    detail::check_cols(x.cols(), in, x.rows(), name);
    Matrix<S> y = x * p.value(weight_name).transpose();
    if (bias) y.rowwise() += detail::row_view(p.entry(bias_name).value);
    return y;
  }

  Matrix<S> backward(ParamStore<S>& p, const Matrix<S>& x, const Matrix<S>& dy) const {
    detail::check_cols(dy.cols(), out, dy.rows(), name + " (cotangent)");
    p.grad(weight_name).noalias() += dy.transpose() * x;
    if (bias) detail::row_view(p.entry(bias_name).grad) += dy.colwise().sum();
    return dy * p.value(weight_name);
  }
};

/// Row-wise layer normalization with learned gain and shift.
template <typename S>
struct LayerNorm {
  std::string name;
  Eigen::Index dim = 0;
  double eps = 1e-5;
  std::string gain_name;
  std::string shift_name;

  struct Cache {
    Matrix<S> normalized;
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(std::string name_, Eigen::Index dim_)
      : name(std::move(name_)), dim(dim_), gain_name(name + ".gain"), shift_name(name + ".shift") {}

  void declare(ParamStore<S>& p, Rng& rng) const {
    initialize(p.declare(gain_name, {static_cast<std::size_t>(dim)}), Init::kOnes, rng);
    initialize(p.declare(shift_name, {static_cast<std::size_t>(dim)}), Init::kZeros, rng);
  }

  /// Pre-affine normalization only.
  Matrix<S> normalize(const Matrix<S>& x, Cache* cache) const {
    detail::check_cols(x.cols(), dim, x.rows(), name);
    Matrix<S> xhat(x.rows(), x.cols());
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const S mean = x.row(r).mean();
      const S var = (x.row(r).array() - mean).square().mean();
      inv_std(r) = S(1) / std::sqrt(var + static_cast<S>(eps));
      xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
    if (cache) cache->inv_std = std::move(inv_std);
    return xhat;
  }

  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& x, Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.normalized = normalize(x, &c);
    Matrix<S> y = c.normalized.array().rowwise() * detail::row_view(p.entry(gain_name).value).array();
    y.rowwise() += detail::row_view(p.entry(shift_name).value);
    return y;
  }

  Matrix<S> backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dy) const {
    const auto gain = detail::row_view(p.entry(gain_name).value);
    detail::row_view(p.entry(gain_name).grad) += (dy.array() * c.normalized.array()).colwise().sum().matrix();
    detail::row_view(p.entry(shift_name).grad) += dy.colwise().sum();
    Matrix<S> dxhat = dy.array().rowwise() * gain.array();
    const S n = static_cast<S>(dim);
    Matrix<S> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const S sum_d = dxhat.row(r).sum();
      const S sum_dx = dxhat.row(r).dot(c.normalized.row(r));
      dx.row(r) = (c.inv_std(r) / n) *
                  (n * dxhat.row(r).array() - sum_d - c.normalized.row(r).array() * sum_dx).matrix();
    }
    return dx;
  }
};

/// Gaussian-error linear unit (exact erf form).
template <typename S>
Matrix<S> gelu(const Matrix<S>& x) {
  return x.unaryExpr([](S v) { return S(0.5) * v * (S(1) + std::erf(v * static_cast<S>(M_SQRT1_2))); });
}

template <typename S>
Matrix<S> gelu_backward(const Matrix<S>& x, const Matrix<S>& dy) {
  const S inv_sqrt_2pi = static_cast<S>(0.5 * M_2_SQRTPI * M_SQRT1_2);
  Matrix<S> d = x.unaryExpr([inv_sqrt_2pi](S v) {
    const S cdf = S(0.5) * (S(1) + std::erf(v * static_cast<S>(M_SQRT1_2)));
    return cdf + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
  });
  return d.cwiseProduct(dy);
}

/// Linear -> GELU -> Linear.
template <typename S>
struct Mlp {
  Linear<S> fc1;
  Linear<S> fc2;

  struct Cache {
    Matrix<S> x;
    Matrix<S> pre;
    Matrix<S> hidden;
  };

  Mlp() = default;
  Mlp(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out,
      Init out_init = Init::kTruncatedNormal)
      : fc1(name + ".fc1", in, hidden), fc2(name + ".fc2", hidden, out, true, out_init) {}

  void declare(ParamStore<S>& p, Rng& rng) const {
    fc1.declare(p, rng);
    fc2.declare(p, rng);
  }

  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& x, Cache* cache) const {
    Matrix<S> pre = fc1.forward(p, x);
    Matrix<S> hidden = gelu(pre);
    Matrix<S> y = fc2.forward(p, hidden);
    if (cache) *cache = {x, std::move(pre), std::move(hidden)};
    return y;
  }

  Matrix<S> backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dy) const {
    Matrix<S> dhidden = fc2.backward(p, c.hidden, dy);
    return fc1.backward(p, c.x, gelu_backward(c.pre, dhidden));
  }
};

/// Batched attention layout: queries come in `groups` contiguous blocks of
/// `q_len` rows, keys/values in `groups` blocks of `kv_len` rows. Attention
/// never crosses groups.
struct AttentionShape {
  Eigen::Index groups = 1;
  Eigen::Index q_len = 1;
  Eigen::Index kv_len = 1;
  Eigen::Index heads = 1;
};

template <typename S>
struct AttentionCache {
  // Row ((g * heads + h) * q_len + i) holds the softmax weights of query i.
  Matrix<S> probs;
};

/// softmax(Q K^T / sqrt(d_head) + key_bias) V, per group and head.
/// `key_bias` (optional) has shape [groups * kv_len, heads].
template <typename S>
Matrix<S> softmax_attention(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                            const AttentionShape& sh, const Matrix<S>* key_bias,
                            AttentionCache<S>* cache) {
  const Eigen::Index dim = q.cols();
  if (k.cols() != dim || v.cols() != dim || q.rows() != sh.groups * sh.q_len ||
      k.rows() != sh.groups * sh.kv_len || v.rows() != k.rows() || dim % sh.heads != 0)
    fail(ErrorCode::kShape, "attention: q " + shape_string(q.rows(), q.cols()) + ", k " +
                                shape_string(k.rows(), k.cols()) + ", v " + shape_string(v.rows(), v.cols()));
  if (key_bias && (key_bias->rows() != k.rows() || key_bias->cols() != sh.heads))
    fail(ErrorCode::kShape, "attention bias " + shape_string(key_bias->rows(), key_bias->cols()) +
                                " vs keys " + shape_string(k.rows(), sh.heads));
  const Eigen::Index dh = dim / sh.heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Matrix<S> out(q.rows(), dim);
  if (cache) cache->probs.resize(sh.groups * sh.heads * sh.q_len, sh.kv_len);
  Matrix<S> logits(sh.q_len, sh.kv_len);
  for (Eigen::Index g = 0; g < sh.groups; ++g) {
    for (Eigen::Index h = 0; h < sh.heads; ++h) {
      const auto Q = q.block(g * sh.q_len, h * dh, sh.q_len, dh);
      const auto K = k.block(g * sh.kv_len, h * dh, sh.kv_len, dh);
      const auto V = v.block(g * sh.kv_len, h * dh, sh.kv_len, dh);
      logits.noalias() = (Q * K.transpose()) * scale;
      if (key_bias) logits.rowwise() += key_bias->col(h).segment(g * sh.kv_len, sh.kv_len).transpose();
      for (Eigen::Index i = 0; i < sh.q_len; ++i) {
        const S mx = logits.row(i).maxCoeff();
        logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
        logits.row(i) /= logits.row(i).sum();
      }
      out.block(g * sh.q_len, h * dh, sh.q_len, dh).noalias() = logits * V;
      if (cache) cache->probs.block((g * sh.heads + h) * sh.q_len, 0, sh.q_len, sh.kv_len) = logits;
    }
  }
  return out;
}

template <typename S>
struct AttentionGrads {
  Matrix<S> dq;
  Matrix<S> dk;
  Matrix<S> dv;
  Matrix<S> dbias;  // empty unless a bias was used
};

template <typename S>
AttentionGrads<S> softmax_attention_backward(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                                             const AttentionShape& sh, const AttentionCache<S>& cache,
                                             const Matrix<S>& dout, bool with_bias) {
  const Eigen::Index dim = q.cols();
  const Eigen::Index dh = dim / sh.heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  AttentionGrads<S> g{Matrix<S>::Zero(q.rows(), dim), Matrix<S>::Zero(k.rows(), dim),
                      Matrix<S>::Zero(v.rows(), dim), Matrix<S>()};
  if (with_bias) g.dbias = Matrix<S>::Zero(k.rows(), sh.heads);
  Matrix<S> dp(sh.q_len, sh.kv_len);
  for (Eigen::Index gi = 0; gi < sh.groups; ++gi) {
    for (Eigen::Index h = 0; h < sh.heads; ++h) {
      const auto P = cache.probs.block((gi * sh.heads + h) * sh.q_len, 0, sh.q_len, sh.kv_len);
      const auto Q = q.block(gi * sh.q_len, h * dh, sh.q_len, dh);
      const auto K = k.block(gi * sh.kv_len, h * dh, sh.kv_len, dh);
      const auto V = v.block(gi * sh.kv_len, h * dh, sh.kv_len, dh);
      const auto dO = dout.block(gi * sh.q_len, h * dh, sh.q_len, dh);
      g.dv.block(gi * sh.kv_len, h * dh, sh.kv_len, dh).noalias() += P.transpose() * dO;
      dp.noalias() = dO * V.transpose();
      for (Eigen::Index i = 0; i < sh.q_len; ++i) {
        const S dot = dp.row(i).dot(P.row(i));
        dp.row(i) = (P.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      if (with_bias) g.dbias.col(h).segment(gi * sh.kv_len, sh.kv_len) += dp.colwise().sum().transpose();
      g.dq.block(gi * sh.q_len, h * dh, sh.q_len, dh).noalias() += (dp * K) * scale;
      g.dk.block(gi * sh.kv_len, h * dh, sh.kv_len, dh).noalias() += (dp.transpose() * Q) * scale;
    }
  }
  return g;
}

/// Projected multi-head cross-attention: out = Wo * attn(Wq xq, Wk xkv, Wv xkv).
template <typename S>
struct MultiHeadAttention {
  Linear<S> q_proj;
  Linear<S> k_proj;
  Linear<S> v_proj;
  Linear<S> o_proj;
  Eigen::Index heads = 1;

  struct Cache {
    Matrix<S> xq, xkv, q, k, v, attended;
    AttentionCache<S> attention;
    AttentionShape shape;
    bool with_bias = false;
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, Eigen::Index q_dim, Eigen::Index kv_dim, Eigen::Index model_dim,
                     Eigen::Index out_dim, Eigen::Index heads_, Init out_init = Init::kTruncatedNormal)
      : q_proj(name + ".q", q_dim, model_dim),
        k_proj(name + ".k", kv_dim, model_dim),
        v_proj(name + ".v", kv_dim, model_dim),
        o_proj(name + ".o", model_dim, out_dim, true, out_init),
        heads(heads_) {
    require(model_dim % heads_ == 0, ErrorCode::kConfig, name + ": width not divisible by heads");
  }

  void declare(ParamStore<S>& p, Rng& rng) const {
    q_proj.declare(p, rng);
    k_proj.declare(p, rng);
    v_proj.declare(p, rng);
    o_proj.declare(p, rng);
  }

  Matrix<S> forward(const ParamStore<S>& p, const Matrix<S>& xq, const Matrix<S>& xkv, Eigen::Index groups,
                    const Matrix<S>* key_bias, Cache* cache) const {
    require(groups > 0 && xq.rows() % groups == 0 && xkv.rows() % groups == 0, ErrorCode::kShape,
            q_proj.name + ": rows " + std::to_string(xq.rows()) + "/" + std::to_string(xkv.rows()) +
                " not divisible into " + std::to_string(groups) + " groups");
    const AttentionShape sh{groups, xq.rows() / groups, xkv.rows() / groups, heads};
    Matrix<S> q = q_proj.forward(p, xq);
    Matrix<S> k = k_proj.forward(p, xkv);
    Matrix<S> v = v_proj.forward(p, xkv);
    Cache local;
    Cache& c = cache ? *cache : local;
    Matrix<S> attended = softmax_attention(q, k, v, sh, key_bias, cache ? &c.attention : nullptr);
    Matrix<S> y = o_proj.forward(p, attended);
    if (cache) {
      c.xq = xq;
      c.xkv = xkv;
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.attended = std::move(attended);
      c.shape = sh;
      c.with_bias = key_bias != nullptr;
    }
    return y;
  }

  struct InputGrads {
    Matrix<S> dxq;
    Matrix<S> dxkv;
    Matrix<S> dbias;
  };

  InputGrads backward(ParamStore<S>& p, const Cache& c, const Matrix<S>& dy) const {
    Matrix<S> dattended = o_proj.backward(p, c.attended, dy);
    AttentionGrads<S> g = softmax_attention_backward(c.q, c.k, c.v, c.shape, c.attention, dattended, c.with_bias);
    InputGrads out;
    out.dxq = q_proj.backward(p, c.xq, g.dq);
    out.dxkv = k_proj.backward(p, c.xkv, g.dk);
    out.dxkv += v_proj.backward(p, c.xkv, g.dv);
    out.dbias = std::move(g.dbias);
    return out;
  }
};

}  // namespace tapip3d::nn
