#pragma once

// Registered finite-difference checks for every differentiable piece of the
// tracker, all in double precision on tiny shapes.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tapip3d/gradcheck.hpp"
#include "tapip3d/model.hpp"
#include "tapip3d/n2n_attention.hpp"
#include "tapip3d/nn.hpp"
#include "tapip3d/pipeline.hpp"
#include "tapip3d/refiner.hpp"
#include "tapip3d/synthetic.hpp"
#include "tapip3d/training.hpp"

namespace tapip3d::gradcheck {

using P = ParamStore<double>;
using M = Matrix<double>;

inline constexpr double kEpsilon = 1e-5;
inline constexpr double kTolerance = 1e-4;
// Denominator floor: gradients that are exactly zero (key biases under
// softmax) otherwise turn roundoff into large relative errors.
inline constexpr double kFloor = 1e-4;

inline M random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  M m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Replaces every parameter with N(0, scale^2) so no gradient path is
/// trivially zero (zero-initialized heads, unit gains).
inline void randomize(P& p, Rng& rng, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& e : p.entries())
    for (double& v : e.value.data()) v = n(rng);
}

inline double dot(const M& a, const M& b) { return (a.array() * b.array()).sum(); }

/// Copies into the existing buffer; probes hold spans over it.
inline void assign(M& dst, const M& src) { dst = src; }

inline void add_param_probes(GradCheckCase& c, P& p) {
  for (auto& e : p.entries()) c.probes.push_back({e.name, e.value.data(), e.grad.data()});
}

inline void add_probe(GradCheckCase& c, const std::string& label, M& value, M& grad) {
  grad = M::Zero(value.rows(), value.cols());
  c.probes.push_back({label, std::span<double>(value.data(), value.size()), std::span<double>(grad.data(), grad.size())});
}

// ---------------------------------------------------------------- nn core

inline GradCheckCase linear_case(std::uint64_t seed) {
  struct St {
    nn::Linear<double> op{"lin", 5, 3};
    P p;
    M x, dx, r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  s->x = random_matrix(4, 5, rng);
  s->r = random_matrix(4, 3, rng);
  GradCheckCase c{"nn.linear", [s] { return dot(s->r, s->op.forward(s->p, s->x)); },
                  [s] {
                    s->p.zero_grad();
                    assign(s->dx, s->op.backward(s->p, s->x, s->r));
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "x", s->x, s->dx);
  return c;
}

inline GradCheckCase layer_norm_case(std::uint64_t seed) {
  struct St {
    nn::LayerNorm<double> op{"ln", 6};
    P p;
    M x, dx, r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  s->x = random_matrix(3, 6, rng);
  s->r = random_matrix(3, 6, rng);
  GradCheckCase c{"nn.layer_norm", [s] { return dot(s->r, s->op.forward(s->p, s->x, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    typename nn::LayerNorm<double>::Cache cache;
                    s->op.forward(s->p, s->x, &cache);
                    assign(s->dx, s->op.backward(s->p, cache, s->r));
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "x", s->x, s->dx);
  return c;
}

inline GradCheckCase gelu_case(std::uint64_t seed) {
  struct St {
    M x, dx, r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->x = random_matrix(3, 5, rng, 2.0);
  s->r = random_matrix(3, 5, rng);
  GradCheckCase c{"nn.gelu", [s] { return dot(s->r, nn::gelu(s->x)); },
                  [s] { assign(s->dx, nn::gelu_backward(s->x, s->r)); }, {}};
  add_probe(c, "x", s->x, s->dx);
  return c;
}

inline GradCheckCase mlp_case(std::uint64_t seed) {
  struct St {
    nn::Mlp<double> op{"mlp", 4, 8, 3};
    P p;
    M x, dx, r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  s->x = random_matrix(3, 4, rng);
  s->r = random_matrix(3, 3, rng);
  GradCheckCase c{"nn.mlp", [s] { return dot(s->r, s->op.forward(s->p, s->x, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    typename nn::Mlp<double>::Cache cache;
                    s->op.forward(s->p, s->x, &cache);
                    assign(s->dx, s->op.backward(s->p, cache, s->r));
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "x", s->x, s->dx);
  return c;
}

inline GradCheckCase fourier_case(std::uint64_t seed) {
  struct St {
    nn::FourierEncoding op{3, 1.0};
    M x, dx, r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->x = random_matrix(4, 3, rng, 0.5);
  s->r = random_matrix(4, s->op.width(3), rng);
  GradCheckCase c{"nn.fourier", [s] { return dot(s->r, s->op.encode<double>(s->x)); },
                  [s] { assign(s->dx, s->op.backward(s->x, s->r)); }, {}};
  add_probe(c, "x", s->x, s->dx);
  return c;
}

inline GradCheckCase attention_case(std::uint64_t seed) {
  struct St {
    nn::MultiHeadAttention<double> op{"mha", 4, 6, 8, 5, 2};
    P p;
    M xq, xkv, bias, dxq, dxkv, dbias, r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  const Eigen::Index groups = 2;
  s->xq = random_matrix(groups * 2, 4, rng);
  s->xkv = random_matrix(groups * 3, 6, rng);
  s->bias = random_matrix(groups * 3, 2, rng);
  s->r = random_matrix(groups * 2, 5, rng);
  GradCheckCase c{"nn.attention",
                  [s] { return dot(s->r, s->op.forward(s->p, s->xq, s->xkv, 2, &s->bias, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    typename nn::MultiHeadAttention<double>::Cache cache;
                    s->op.forward(s->p, s->xq, s->xkv, 2, &s->bias, &cache);
                    auto g = s->op.backward(s->p, cache, s->r);
                    s->dxq = g.dxq;
                    s->dxkv = g.dxkv;
                    s->dbias = g.dbias;
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "xq", s->xq, s->dxq);
  add_probe(c, "xkv", s->xkv, s->dxkv);
  add_probe(c, "key_bias", s->bias, s->dbias);
  return c;
}

// ---------------------------------------------------------------- n2n

inline GradCheckCase n2n_block_case(std::uint64_t seed) {
  struct St {
    N2NBlock<double> op{"blk", 4, 2, 2};
    P p;
    M support, context, sbias, cbias, ds, dc, dsb, dcb, rs, rc;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  const Eigen::Index groups = 3, ks = 2, kc = 3;
  s->support = random_matrix(groups * ks, 4, rng);
  s->context = random_matrix(groups * kc, 4, rng);
  s->sbias = random_matrix(groups * ks, 2, rng);
  s->cbias = random_matrix(groups * kc, 2, rng);
  s->rs = random_matrix(groups * ks, 4, rng);
  s->rc = random_matrix(groups * kc, 4, rng);
  GradCheckCase c{"n2n.block",
                  [s] {
                    auto [a, b] = s->op.forward(s->p, s->support, s->context, 3, &s->cbias, &s->sbias, nullptr);
                    return dot(s->rs, a) + dot(s->rc, b);
                  },
                  [s] {
                    s->p.zero_grad();
                    typename N2NBlock<double>::Cache cache;
                    s->op.forward(s->p, s->support, s->context, 3, &s->cbias, &s->sbias, &cache);
                    auto g = s->op.backward(s->p, cache, s->rs, s->rc);
                    s->ds = g.dsupport;
                    s->dc = g.dcontext;
                    s->dsb = g.dsupport_bias;
                    s->dcb = g.dcontext_bias;
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "support", s->support, s->ds);
  add_probe(c, "context", s->context, s->dc);
  add_probe(c, "support_bias", s->sbias, s->dsb);
  add_probe(c, "context_bias", s->cbias, s->dcb);
  return c;
}

inline GradCheckCase pool_case(std::uint64_t seed, bool supplied_query) {
  struct St {
    AttentionPool<double> op{"pool", 4, 2};
    P p;
    M bag, query, dbag, dquery, r;
    bool supplied = false;
  };
  auto s = std::make_shared<St>();
  s->supplied = supplied_query;
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  s->bag = random_matrix(2 * 3, 4, rng);
  s->query = random_matrix(2, 4, rng);
  s->r = random_matrix(2, 4, rng);
  GradCheckCase c{supplied_query ? "n2n.pool_query" : "n2n.pool",
                  [s] { return dot(s->r, s->op.forward(s->p, s->bag, 2, s->supplied ? &s->query : nullptr, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    typename AttentionPool<double>::Cache cache;
                    s->op.forward(s->p, s->bag, 2, s->supplied ? &s->query : nullptr, &cache);
                    M dq;
                    assign(s->dbag, s->op.backward(s->p, cache, s->r, &dq));
                    if (s->supplied) s->dquery = dq;
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "bag", s->bag, s->dbag);
  if (supplied_query) add_probe(c, "query", s->query, s->dquery);
  return c;
}

/// One pyramid level of neighborhood attention, N2N or the P2N baseline.
inline GradCheckCase level_case(std::uint64_t seed, AttentionMode mode, bool offset_bias) {
  struct St {
    NeighborhoodAttention<double> op;
    P p;
    BagBatch<double> batch;
    M ds, dc, r;
  };
  auto s = std::make_shared<St>();
  N2NConfig cfg;
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.mlp_ratio = 1;
  cfg.fourier_bands = 2;
  cfg.offset_bias = offset_bias;
  cfg.mode = mode;
  s->op = NeighborhoodAttention<double>(cfg);
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  auto& b = s->batch;
  b.queries = 2;
  b.timesteps = 3;
  b.support_size = 3;
  b.context_size = 2;
  b.support_features = random_matrix(b.queries * b.support_size, 4, rng);
  b.support_offsets = random_matrix(b.queries * b.support_size, 3, rng, 0.3);
  b.context_features = random_matrix(b.queries * b.timesteps * b.context_size, 4, rng);
  b.context_offsets = random_matrix(b.queries * b.timesteps * b.context_size, 3, rng, 0.3);
  s->r = random_matrix(b.queries * b.timesteps, 4, rng);
  auto summary = [s](const PooledPair<double>& out) {
    return fuse_and_concat(std::vector<PooledPair<double>>{out});
  };
  std::string name = mode == AttentionMode::kP2N ? "n2n.level_p2n" : "n2n.level";
  if (offset_bias) name += "_bias";
  GradCheckCase c{name, [s, summary] { return dot(s->r, summary(s->op.forward_level(s->p, s->batch, nullptr))); },
                  [s] {
                    s->p.zero_grad();
                    typename NeighborhoodAttention<double>::LevelCache cache;
                    s->op.forward_level(s->p, s->batch, &cache);
                    auto g = s->op.backward_level(s->p, cache, s->r);
                    s->ds = g.dsupport_features;
                    s->dc = g.dcontext_features;
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "support_features", b.support_features, s->ds);
  add_probe(c, "context_features", b.context_features, s->dc);
  return c;
}

// ---------------------------------------------------------------- refiner

inline GradCheckCase refiner_case(std::uint64_t seed, int virtual_tracks) {
  struct St {
    Refiner<double> op;
    P p;
    M tokens, dtokens, r;
  };
  auto s = std::make_shared<St>();
  RefinerConfig cfg{1, 2, 8, virtual_tracks, 2, 1, 2};
  s->op = Refiner<double>(cfg, 5);
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  s->tokens = random_matrix(2 * 3, 5, rng);
  s->r = random_matrix(2 * 3, 4, rng);
  GradCheckCase c{virtual_tracks > 0 ? "refiner" : "refiner_no_virtual",
                  [s] { return dot(s->r, s->op.forward(s->p, s->tokens, 2, 3, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    typename Refiner<double>::Cache cache;
                    s->op.forward(s->p, s->tokens, 2, 3, &cache);
                    assign(s->dtokens, s->op.backward(s->p, cache, s->r));
                  },
                  {}};
  add_param_probes(c, s->p);
  add_probe(c, "tokens", s->tokens, s->dtokens);
  return c;
}

// ---------------------------------------------------------------- full model

/// A very small synthetic scene for whole-model checks.
inline SceneSpec tiny_scene_spec(std::uint64_t seed) {
  SceneSpec spec;
  spec.frames = 6;
  spec.intrinsics = CameraIntrinsics{15.0, 15.0, 8.0, 6.0, 16, 12};
  spec.bodies = 1;
  spec.points_per_body = 200;
  spec.queries = 3;
  spec.splat_radius = 0;
  spec.seed = seed;
  return spec;
}

inline GradCheckCase encoder_case(std::uint64_t seed) {
  struct St {
    ToyEncoder<double> op{EncoderConfig{3, 2, 2}};
    P p;
    Image image;
    M r;
  };
  auto s = std::make_shared<St>();
  Rng rng(seed);
  s->op.declare(s->p, rng);
  randomize(s->p, rng);
  s->image.width = 6;
  s->image.height = 4;
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 6 * 4 * 3; ++i) s->image.rgb.push_back(u(rng));
  s->r = random_matrix(3 * 2, 3, rng);
  GradCheckCase c{"feature.encoder", [s] { return dot(s->r, s->op.forward(s->p, s->image, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    typename ToyEncoder<double>::Cache cache;
                    s->op.forward(s->p, s->image, &cache);
                    s->op.backward(s->p, cache, s->r);
                  },
                  {}};
  add_param_probes(c, s->p);
  return c;
}

/// One refinement iteration: bags, neighborhood attention over every
/// level, token assembly and the refiner, with feature maps as inputs.
inline GradCheckCase iteration_case(std::uint64_t seed) {
  struct St {
    TrackerModel<double> model{ModelConfig::tiny()};
    P p;
    SyntheticScene scene;
    std::unique_ptr<VideoSession<double>> video;
    std::vector<std::vector<Bag>> support;
    WindowContext<double> ctx;
    TrajectoryState state;
    FeatureGradients<double> dfeatures;
    M r;
  };
  auto s = std::make_shared<St>();
  s->p = s->model.init_params(seed);
  Rng rng(seed);
  randomize(s->p, rng);
  s->scene = generate(tiny_scene_spec(seed));
  s->video = std::make_unique<VideoSession<double>>(
      open_session(s->model, s->p, s->scene.bundle, CoordinateSystem::kXYZCamera, false));
  s->video->set_sigma(s->video->compute_sigma({}, std::nullopt));
  const auto queries = scaled_queries(active_queries(*s->video, s->scene.bundle.query_list()), s->video->sigma);
  const int T = s->model.config().window;
  s->support = s->model.support_bags(queries, s->video->frames);
  s->ctx = WindowContext<double>{window_frames(0, T, s->scene.bundle.frames), &s->video->frames, &s->video->features};
  s->state = initialize_window(queries, T);
  std::normal_distribution<double> n(0.0, 0.05);
  for (Eigen::Index i = 0; i < s->state.positions.size(); ++i) s->state.positions.data()[i] += n(rng);
  for (Eigen::Index i = 0; i < s->state.logits.size(); ++i) s->state.logits(i) = n(rng) * 10.0;
  s->r = random_matrix(s->state.positions.rows(), 4, rng);
  s->dfeatures = zero_feature_gradients(s->video->features);
  GradCheckCase c{"model.iteration",
                  [s] { return dot(s->r, s->model.iterate(s->p, s->ctx, s->support, s->state, nullptr)); },
                  [s] {
                    s->p.zero_grad();
                    for (auto& f : s->dfeatures)
                      for (auto& m : f) m.setZero();
                    typename TrackerModel<double>::IterationCache cache;
                    s->model.iterate(s->p, s->ctx, s->support, s->state, &cache);
                    s->model.iterate_backward(s->p, s->support, cache, s->r, s->dfeatures);
                  },
                  {}};
  add_param_probes(c, s->p);
  for (std::size_t f = 0; f < s->video->features.size(); ++f) {
    for (std::size_t l = 0; l < s->video->features[f].size(); ++l) {
      M& v = s->video->features[f][l];
      M& g = s->dfeatures[f][l];
      c.probes.push_back({"features[" + std::to_string(f) + "][" + std::to_string(l) + "]",
                          std::span<double>(v.data(), v.size()), std::span<double>(g.data(), g.size())});
    }
  }
  return c;
}

/// The full discounted training loss of one step, differentiated through
/// the detached computation: every iteration's input is frozen from a
/// recorded forward pass, so finite differences see the same graph.
inline GradCheckCase training_loss_case(std::uint64_t seed, BackpropSchedule schedule) {
  struct St {
    TrackerModel<double> model{ModelConfig::tiny()};
    P p;
    SyntheticScene scene;
    TrainConfig cfg;
    StepRecord record;
  };
  auto s = std::make_shared<St>();
  s->p = s->model.init_params(seed);
  Rng rng(seed);
  randomize(s->p, rng, 0.3);
  s->scene = generate(tiny_scene_spec(seed));
  s->cfg.loss.iterations = 2;
  s->cfg.schedule = schedule;
  s->record = train_step(s->model, s->p, s->scene.bundle, s->cfg, false).record;
  GradCheckCase c{schedule == BackpropSchedule::kEager ? "training.loss" : "training.loss_batch_end",
                  [s] { return train_step(s->model, s->p, s->scene.bundle, s->cfg, false, &s->record).loss; },
                  [s] {
                    s->p.zero_grad();
                    train_step(s->model, s->p, s->scene.bundle, s->cfg, true, &s->record);
                  },
                  {}};
  add_param_probes(c, s->p);
  return c;
}

// ---------------------------------------------------------------- registry

/// The quick suite covers nn core, n2n and refiner; `full` adds the
/// encoder, a whole model iteration and the training loss.
inline std::vector<GradCheckCase> suite(bool full, std::uint64_t seed = 7) {
  std::vector<GradCheckCase> out;
  out.push_back(linear_case(seed));
  out.push_back(layer_norm_case(seed + 1));
  out.push_back(gelu_case(seed + 2));
  out.push_back(mlp_case(seed + 3));
  out.push_back(fourier_case(seed + 4));
  out.push_back(attention_case(seed + 5));
  out.push_back(n2n_block_case(seed + 6));
  out.push_back(pool_case(seed + 7, false));
  out.push_back(pool_case(seed + 8, true));
  out.push_back(level_case(seed + 9, AttentionMode::kN2N, false));
  out.push_back(level_case(seed + 10, AttentionMode::kN2N, true));
  out.push_back(level_case(seed + 11, AttentionMode::kP2N, false));
  out.push_back(refiner_case(seed + 12, 2));
  out.push_back(refiner_case(seed + 13, 0));
  if (full) {
    out.push_back(encoder_case(seed + 14));
    out.push_back(iteration_case(seed + 15));
    out.push_back(training_loss_case(seed + 16, BackpropSchedule::kEager));
  }
  return out;
}

inline std::vector<GradCheckReport> run_suite(bool full, std::uint64_t seed = 7) {
  std::vector<GradCheckReport> reports;
  for (const auto& c : suite(full, seed)) reports.push_back(grad_check(c, kEpsilon, kTolerance, kFloor));
  return reports;
}

}  // namespace tapip3d::gradcheck
