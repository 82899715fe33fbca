#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/model.hpp"
#include "tapip3d/pipeline.hpp"
#include "tapip3d/scene.hpp"
#include "tapip3d/tensor.hpp"

namespace tapip3d {

struct LossConfig {
  double alpha_vis = 3.0;
  double gamma = 0.8;
  double multiplier = 0.005;
  int iterations = 4;              // M_train
  bool supervise_occluded = true;  // position loss on GT-occluded frames too
};

/// One supervised (query, frame) entry.
struct LossTarget {
  Vec3 position = Vec3::Zero();  // GT, unscaled active space
  bool visible = false;
  double depth = 1.0;  // GT camera depth
  bool supervise_position = true;
};

struct LossValue {
  double value = 0.0;
  Matrix<double> dpositions;  // [N, 3]
  Eigen::VectorXd dlogits;    // [N]
};

/// Binary cross-entropy on a logit, fused with the sigmoid.
inline double bce_with_logit(double logit, bool label) {
  return std::max(logit, 0.0) - (label ? logit : 0.0) + std::log1p(std::exp(-std::abs(logit)));
}

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// sum_i (1/d_i) |p_i - g_i| + alpha_vis * CE(o_i, v_i), with gradients.
/// Rows of `positions` are entries; `targets[i]` empty means unsupervised.
inline LossValue compute_loss(const Matrix<double>& positions, const Eigen::VectorXd& logits,
                              const std::vector<std::optional<LossTarget>>& targets, double alpha_vis) {
  require(positions.rows() == logits.size() && std::size_t(positions.rows()) == targets.size(), ErrorCode::kShape,
          "loss inputs disagree on the number of entries");
  LossValue out;
  out.dpositions = Matrix<double>::Zero(positions.rows(), 3);
  out.dlogits = Eigen::VectorXd::Zero(logits.size());
  for (Eigen::Index i = 0; i < positions.rows(); ++i) {
    const auto& t = targets[i];
    if (!t) continue;
    require(t->depth > 0.0 && std::isfinite(t->depth), ErrorCode::kLoss,
            "nonpositive depth on supervised entry " + std::to_string(i));
    if (t->supervise_position) {
      const Eigen::RowVector3d e = positions.row(i) - t->position.transpose();
      const double n = e.norm();
      out.value += n / t->depth;
      if (n > 0.0) out.dpositions.row(i) = e / (n * t->depth);
    }
    out.value += alpha_vis * bce_with_logit(logits(i), t->visible);
    out.dlogits(i) = alpha_vis * (sigmoid(logits(i)) - (t->visible ? 1.0 : 0.0));
  }
  return out;
}

/// gamma^(M - m) for 1-based iteration m.
inline double discount_weight(int m, int iterations, double gamma) { return std::pow(gamma, iterations - m); }

inline double discounted_loss(const std::vector<double>& per_iteration, double gamma, double multiplier) {
  require(!per_iteration.empty(), ErrorCode::kConfig, "need at least one iteration");
  const int M = static_cast<int>(per_iteration.size());
  double total = 0.0;
  for (int m = 1; m <= M; ++m) total += discount_weight(m, M, gamma) * per_iteration[m - 1];
  return multiplier * total;
}

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  double max_grad_norm = 10.0;
};

/// Decoupled-weight-decay Adam with global gradient-norm clipping.
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  int steps() const { return step_; }

  /// Returns the pre-clipping gradient norm.
  double step(ParamStore<S>& p, std::optional<double> lr = std::nullopt) {
    const double rate = lr.value_or(config_.lr);
    const double norm = p.grad_norm();
    const double clip = norm > config_.max_grad_norm && norm > 0.0 ? config_.max_grad_norm / norm : 1.0;
    if (m_.empty()) {
      for (const auto& e : p.entries()) {
        m_.emplace_back(e.value.size(), 0.0);
        v_.emplace_back(e.value.size(), 0.0);
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, step_);
    const double bc2 = 1.0 - std::pow(config_.beta2, step_);
    std::size_t k = 0;
    for (auto& e : p.entries()) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double g = static_cast<double>(e.grad.data()[i]) * clip;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        double w = static_cast<double>(e.value.data()[i]);
        w -= rate * config_.weight_decay * w;
        w -= rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
        e.value.data()[i] = static_cast<S>(w);
      }
    }
    return norm;
  }

 private:
  AdamWConfig config_;
  int step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Photometric and geometric augmentation magnitudes; all zero is identity.
struct AugmentConfig {
  double blur_sigma = 0.0;        // Gaussian blur of RGB, pixels
  double occlusion_prob = 0.0;    // chance per frame of a flat-colored patch
  double color_jitter = 0.0;      // brightness/contrast jitter amplitude
  RigidSequenceConfig rigid{0.0, 0.0, 8};
};

namespace detail {

inline void blur_frame(std::vector<float>& img, int w, int h, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= sum;
  std::vector<float> tmp(img.size());
  auto pass = [&](const std::vector<float>& src, std::vector<float>& dst, bool horizontal) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        for (int ch = 0; ch < 3; ++ch) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const int rr = horizontal ? r : std::clamp(r + i, 0, h - 1);
            const int cc = horizontal ? std::clamp(c + i, 0, w - 1) : c;
            acc += k[i + radius] * src[(std::size_t(rr) * w + cc) * 3 + ch];
          }
          dst[(std::size_t(r) * w + c) * 3 + ch] = static_cast<float>(acc);
        }
  };
  pass(img, tmp, true);
  pass(tmp, img, false);
}

}  // namespace detail

/// RGB-only photometric augments plus one smooth rigid sequence applied to
/// point maps, ground truth and queries alike (camera frame of each frame).
inline SceneBundle augment_sample(const SceneBundle& in, const AugmentConfig& cfg, std::uint64_t seed) {
  SceneBundle out = in;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.0, 1.0);
  if (out.has_rgb() && (cfg.blur_sigma > 0 || cfg.occlusion_prob > 0 || cfg.color_jitter > 0)) {
    for (int s = 0; s < out.frames; ++s) {
      Image img = out.image(s);
      if (cfg.color_jitter > 0) {
        const double gain = 1.0 + cfg.color_jitter * u(rng), bias = 0.5 * cfg.color_jitter * u(rng);
        for (auto& x : img.rgb) x = static_cast<float>(x * gain + bias);
      }
      if (cfg.blur_sigma > 0) detail::blur_frame(img.rgb, img.width, img.height, cfg.blur_sigma * pos(rng) + 1e-3);
      if (cfg.occlusion_prob > 0 && pos(rng) < cfg.occlusion_prob) {
        const int pw = 1 + static_cast<int>(pos(rng) * img.width / 4), ph = 1 + static_cast<int>(pos(rng) * img.height / 4);
        const int c0 = static_cast<int>(pos(rng) * (img.width - pw)), r0 = static_cast<int>(pos(rng) * (img.height - ph));
        const float fill = static_cast<float>(pos(rng));
        for (int r = r0; r < r0 + ph; ++r)
          for (int c = c0; c < c0 + pw; ++c)
            for (int ch = 0; ch < 3; ++ch) img.rgb[(std::size_t(r) * img.width + c) * 3 + ch] = fill;
      }
      const std::size_t base = std::size_t(s) * out.pixels() * 3;
      for (std::size_t i = 0; i < img.rgb.size(); ++i)
        out.rgb[base + i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.rgb[i], 0.0f, 1.0f) * 255.0f));
    }
  }
  if (cfg.rigid.rotation_deg > 0 || cfg.rigid.translation > 0) {
    const auto seq = random_rigid_sequence(out.frames, cfg.rigid, rng());
    auto move = [&](float* p, int s) {
      const Vec3 x = seq[s].apply(Vec3(p[0], p[1], p[2]));
      for (int k = 0; k < 3; ++k) p[k] = static_cast<float>(x(k));
    };
    for (int s = 0; s < out.frames; ++s)
      for (std::size_t i = 0; i < out.pixels(); ++i)
        if (out.valid[std::size_t(s) * out.pixels() + i]) move(&out.pointmap[(std::size_t(s) * out.pixels() + i) * 3], s);
    if (out.ground_truth)
      for (int q = 0; q < out.ground_truth->queries; ++q)
        for (int s = 0; s < out.frames; ++s) move(&out.ground_truth->tracks[(std::size_t(q) * out.frames + s) * 3], s);
    for (int q = 0; q < out.query_count(); ++q)
      move(&out.queries[std::size_t(q) * 4 + 1], static_cast<int>(out.queries[std::size_t(q) * 4]));
  }
  return out;
}

enum class BackpropSchedule { kEager, kBatchEnd };

struct TrainConfig {
  AdamWConfig optimizer;
  LossConfig loss;
  CoordinateSystem mode = CoordinateSystem::kXYZCamera;
  ScaleScope scale_scope = ScaleScope::kPerWindow;
  BackpropSchedule schedule = BackpropSchedule::kEager;
  std::optional<AugmentConfig> augment;
  std::function<double(int)> lr_schedule;  // step -> lr; constant when empty
};

/// Settings used by the toy trainer and the `train-toy` command: whole-clip
/// scale, and an lr decaying geometrically from `lr` to lr/100 over `steps`.
/// A constant lr either stalls (small) or oscillates (large) on one scene.
inline TrainConfig toy_train_config(int steps, double lr = 2e-3) {
  require(steps > 0 && lr > 0.0, ErrorCode::kConfig, "toy training needs positive steps and lr");
  TrainConfig cfg;
  cfg.optimizer.lr = lr;
  cfg.scale_scope = ScaleScope::kPerVideo;
  cfg.lr_schedule = [steps, lr](int step) { return lr * std::pow(0.01, double(step) / steps); };
  return cfg;
}

/// Inputs of every refinement iteration of one training step, per window.
/// Replaying a step with these frozen is the detached computation.
struct StepRecord {
  std::vector<double> sigmas;
  std::vector<std::vector<TrajectoryState>> inputs;  // [window][m]
};

struct StepOutput {
  double loss = 0.0;
  std::vector<std::vector<double>> iteration_losses;  // [window][m]
  StepRecord record;
};

/// Loss targets of one window in the session's active space (unscaled).
template <typename S>
std::vector<std::optional<LossTarget>> window_targets(const VideoSession<S>& video, const SceneBundle& scene,
                                                      std::span<const Query> queries, const std::vector<int>& active,
                                                      int start, int T, const LossConfig& cfg) {
  const auto& gt = scene.ground_truth.value();
  std::vector<std::optional<LossTarget>> out;
  for (int q : active) {
    for (int t = 0; t < T; ++t) {
      const int f = start + t;
      const std::size_t gi = std::size_t(q) * scene.frames + f;
      if (f >= scene.frames || f < queries[q].frame || !gt.valid[gi]) {
        out.emplace_back();
        continue;
      }
      const Vec3 cam = scene.gt_position(q, f);
      if (!is_valid_depth(cam.z())) {
        out.emplace_back();
        continue;
      }
      LossTarget target;
      target.position = video.to_active(cam, f);
      target.visible = gt.visible[gi] != 0;
      target.depth = cam.z();
      target.supervise_position = cfg.supervise_occluded || target.visible;
      out.emplace_back(target);
    }
  }
  return out;
}

/// One training step over one scene: windows in order, M supervised
/// iterations each, every iteration's input detached. Parameter grads are
/// accumulated into `params` when `backward` is set (they are not zeroed here).
/// With `frozen`, iteration inputs are taken from the record instead.
template <typename S>
StepOutput train_step(const TrackerModel<S>& model, ParamStore<S>& params, const SceneBundle& scene,
                      const TrainConfig& cfg, bool backward, const StepRecord* frozen = nullptr) {
  require(scene.ground_truth.has_value(), ErrorCode::kConfig, "training needs ground-truth tracks");
  VideoSession<S> video = open_session(model, params, scene, cfg.mode, backward);
  const std::vector<Query> camera_queries = scene.query_list();
  const std::vector<Query> queries = active_queries(video, camera_queries);
  const int T = model.config().window, Sf = scene.frames, M = cfg.loss.iterations;
  const int Q = static_cast<int>(queries.size());
  StepOutput out;
  FeatureGradients<S> dfeatures;
  if (backward) dfeatures = zero_feature_gradients(video.features);

  struct Pending {
    int window;
    std::vector<std::vector<Bag>> support;
    WindowContext<S> ctx;
    std::vector<typename TrackerModel<S>::IterationCache> caches;
    std::vector<Matrix<S>> dupdates;
  };
  std::vector<Pending> pending;

  // Previous window's final estimates (unscaled), per query and frame.
  Matrix<double> known = Matrix<double>::Zero(Eigen::Index(Q) * Sf, 3);
  Eigen::VectorXd known_logits = Eigen::VectorXd::Zero(Eigen::Index(Q) * Sf);
  std::vector<int> last(Q, -1);
  const std::vector<int> starts = window_starts(Sf, T);
  for (std::size_t w = 0; w < starts.size(); ++w) {
    const int start = starts[w];
    const std::vector<int> slots = window_frames(start, T, Sf);
    double sigma;
    if (frozen) {
      sigma = frozen->sigmas.at(w);
    } else {
      sigma = cfg.scale_scope == ScaleScope::kPerWindow ? video.compute_sigma(slots, std::nullopt)
                                                        : video.compute_sigma({}, std::nullopt);
    }
    video.set_sigma(sigma);
    out.record.sigmas.push_back(sigma);
    out.record.inputs.emplace_back();
    out.iteration_losses.emplace_back();

    std::vector<int> active;
    for (int q = 0; q < Q; ++q)
      if (queries[q].frame <= slots.back()) active.push_back(q);
    if (active.empty()) continue;
    std::vector<Query> wq;
    for (int q : active) wq.push_back(queries[q]);
    wq = scaled_queries(wq, sigma);
    TrajectoryState state = initialize_window(wq, T);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int q = active[a];
      if (last[q] < 0) continue;
      for (int t = 0; t < T; ++t) {
        const Eigen::Index src = Eigen::Index(q) * Sf + std::min(start + t, last[q]);
        state.positions.row(state.row(a, t)) = known.row(src) / sigma;
        if (start + t <= last[q]) state.logits(state.row(a, t)) = known_logits(src);  // same hand-off as inference
      }
    }

    Pending job{static_cast<int>(w), model.support_bags(wq, video.frames), WindowContext<S>{slots, &video.frames, &video.features}, {}, {}};
    const auto targets = window_targets(video, scene, queries, active, start, T, cfg.loss);
    for (int m = 1; m <= M; ++m) {
      if (frozen) state = frozen->inputs.at(w).at(m - 1);
      out.record.inputs.back().push_back(state);
      typename TrackerModel<S>::IterationCache cache;
      const Matrix<S> update = model.iterate(params, job.ctx, job.support, state, backward ? &cache : nullptr);
      apply_update(state, split_update<S>(update));
      if (!state.positions.allFinite() || !state.logits.allFinite())
        fail(ErrorCode::kDivergence, "non-finite trajectory at window " + std::to_string(w) + ", iteration " +
                                         std::to_string(m));
      const LossValue lv = compute_loss(state.positions * sigma, state.logits, targets, cfg.loss.alpha_vis);
      const double weight = cfg.loss.multiplier * discount_weight(m, M, cfg.loss.gamma);
      out.iteration_losses.back().push_back(lv.value);
      out.loss += weight * lv.value;
      if (!backward) continue;
      Matrix<S> dupdate(update.rows(), 4);
      dupdate.leftCols(3) = (lv.dpositions * (weight * sigma)).template cast<S>();
      dupdate.col(3) = (lv.dlogits * weight).template cast<S>();
      if (cfg.schedule == BackpropSchedule::kEager) {
        model.iterate_backward(params, job.support, cache, dupdate, dfeatures);
      } else {
        job.caches.push_back(std::move(cache));
        job.dupdates.push_back(std::move(dupdate));
      }
    }
    if (backward && cfg.schedule == BackpropSchedule::kBatchEnd) pending.push_back(std::move(job));

    for (std::size_t a = 0; a < active.size(); ++a) {
      const int q = active[a];
      for (int t = 0; t < T && start + t < Sf; ++t) {
        const Eigen::Index dst = Eigen::Index(q) * Sf + start + t;
        known.row(dst) = state.positions.row(state.row(a, t)) * sigma;
        known_logits(dst) = state.logits(state.row(a, t));
      }
      last[q] = std::min(start + T - 1, Sf - 1);
    }
  }
  if (!std::isfinite(out.loss)) fail(ErrorCode::kDivergence, "non-finite loss");
  if (!backward) return out;
  for (auto& job : pending)
    for (std::size_t m = 0; m < job.caches.size(); ++m)
      model.iterate_backward(params, job.support, job.caches[m], job.dupdates[m], dfeatures);
  // Encoder gradients flow once, after every window.
  if (!video.encoder_caches.empty()) {
    for (int f = 0; f < Sf; ++f) {
      const Matrix<S> d1 = pool_pyramid_backward(dfeatures[f], video.frames[f].levels);
      model.encoder().backward(params, video.encoder_caches[f], d1);
    }
  }
  return out;
}

struct TrainResult {
  std::vector<double> losses;  // loss before each update
  int completed_steps = 0;
};

/// Toy trainer: one scene per step, cycling through `scenes`.
template <typename S>
TrainResult train_toy(const TrackerModel<S>& model, ParamStore<S>& params, const std::vector<SceneBundle>& scenes,
                      int steps, const TrainConfig& cfg, std::uint64_t seed,
                      const std::function<void(int, double)>& on_step = {}) {
  require(!scenes.empty(), ErrorCode::kConfig, "train_toy needs at least one scene");
  require(steps >= 0, ErrorCode::kConfig, "steps must be >= 0");
  AdamW<S> opt(cfg.optimizer);
  TrainResult result;
  std::mt19937_64 rng(seed);
  for (int step = 0; step < steps; ++step) {
    const SceneBundle& base = scenes[step % scenes.size()];
    const std::uint64_t aug_seed = rng();
    const SceneBundle sample = cfg.augment ? augment_sample(base, *cfg.augment, aug_seed) : base;
    params.zero_grad();
    StepOutput so;
    try {
      so = train_step(model, params, sample, cfg, true);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDivergence) throw;
      fail(ErrorCode::kDivergence, std::string(e.what()) + " (step " + std::to_string(step) +
                                       ", last good step " + std::to_string(step - 1) + ")");
    }
    result.losses.push_back(so.loss);
    if (on_step) on_step(step, so.loss);
    opt.step(params, cfg.lr_schedule ? std::optional<double>(cfg.lr_schedule(step)) : std::nullopt);
    for (const auto& e : params.entries())
      if (!e.value.all_finite())
        fail(ErrorCode::kDivergence, "parameter '" + e.name + "' diverged at step " + std::to_string(step) +
                                         " (last good step " + std::to_string(step - 1) + ")");
    result.completed_steps = step + 1;
  }
  return result;
}

}  // namespace tapip3d
