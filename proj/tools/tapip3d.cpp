// Command-line front end.
//
// Exit codes:
//   0  success
//   1  gradcheck failure or unexpected internal error
//   2  invalid input: bad arguments, unreadable/corrupt files, shape
//      mismatches, mode/pose mismatch, missing ground truth
//   3  checkpoint does not match the model configuration
//   4  training or tracking diverged

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "tapip3d.hpp"

namespace {

using namespace tapip3d;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitCheckpoint = 3;
constexpr int kExitDivergence = 4;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::kFormat, "cannot write " + path.string());
  out << text;
}

io::Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kConfig, "cannot open " + path.string());
  try {
    return io::Json::parse(in);
  } catch (const io::Json::exception& ex) {
    fail(ErrorCode::kConfig, "malformed JSON in " + path.string() + ": " + ex.what());
  }
}

ModelConfig preset(const std::string& name) {
  if (name == "toy") return ModelConfig::toy();
  if (name == "desk") return ModelConfig::desk();
  if (name == "tiny") return ModelConfig::tiny();
  fail(ErrorCode::kConfig, "unknown config preset '" + name + "'");
}

ParamStore<float> model_params(const TrackerModel<float>& model, const std::optional<std::string>& ckpt,
                               std::uint64_t seed) {
  ParamStore<float> params = model.init_params(seed);
  if (!ckpt) return params;
  try {
    io::load_checkpoint(*ckpt, model.config(), params);
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  return params;
}

void write_run_manifest(const fs::path& path, const std::string& command, std::uint64_t seed,
                        const std::string& config_hash) {
  io::Json m{{"command", command}, {"seed", seed}, {"config_hash", config_hash}, {"version", io::kVersion}};
  write_text(path, m.dump(2) + "\n");
}

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::optional<std::string> spec;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool verify = false;
  bool two_plane = false;
};

int run_synth(const SynthArgs& a) {
  SceneSpec spec;
  if (a.two_plane) spec = two_plane_spec(a.seed.value_or(0));
  else if (a.spec) spec = io::scene_spec_from_json(read_json(*a.spec));
  if (a.seed) spec.seed = *a.seed;
  const SyntheticScene scene = generate(spec);
  if (a.verify) {
    const VerifyReport report = verify_ground_truth(scene.bundle);
    std::cout << "max reprojection error " << report.max_reprojection_error << " px, max depth error "
              << report.max_depth_error << "\n";
    if (!report.ok) {
      std::cerr << "ground-truth verification failed\n";
      return kExitInvalid;
    }
  }
  io::save_scene(a.out, scene.bundle);
  std::cout << "wrote scene " << a.out << " (" << scene.bundle.frames << " frames, " << scene.bundle.query_count()
            << " queries)\n";
  return kExitOk;
}

struct TrackArgs {
  std::string scene;
  std::string mode = "camera";
  std::optional<std::string> output_mode;
  std::string neighbors = "knn3d";
  std::string attention = "n2n";
  std::string config = "toy";
  std::optional<std::string> ckpt;
  int support_grid = 0;
  bool bidirectional = false;
  std::optional<int> iterations;
  std::string out;
  std::uint64_t seed = 0;
};

int run_track(const TrackArgs& a) {
  ModelConfig cfg = preset(a.config);
  cfg.neighbors.mode = parse_neighbor_mode(a.neighbors);
  cfg.attention.mode = parse_attention_mode(a.attention);
  const SceneBundle scene = io::load_scene(a.scene);
  TrackOptions opt;
  opt.mode = parse_coordinate_system(a.mode);
  if (a.output_mode) opt.output_mode = parse_coordinate_system(*a.output_mode);
  if (opt.mode == CoordinateSystem::kXYZWorld || opt.output_mode == CoordinateSystem::kXYZWorld)
    require(scene.poses.has_value(), ErrorCode::kConfig, "world coordinates need camera poses in the scene");
  opt.support_grid = a.support_grid;
  opt.bidirectional = a.bidirectional;
  opt.iterations = a.iterations;
  const TrackerModel<float> model(cfg);
  const ParamStore<float> params = model_params(model, a.ckpt, a.seed);
  const TrackingResult result = track_video(model, params, scene, opt);
  io::save_result(a.out, result);
  write_run_manifest(a.out + ".run.json", "track", a.seed, io::config_hash(cfg));
  std::cout << "wrote " << result.queries << " tracks over " << result.frames << " frames to " << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string pred;
  std::string scene;
  std::optional<std::string> out;
  bool exclude_query_frame = false;
};

int run_eval(const EvalArgs& a) {
  const TrackingResult pred = io::load_result(a.pred);
  const SceneBundle scene = io::load_scene(a.scene);
  MetricConfig mc;
  mc.exclude_query_frame = a.exclude_query_frame;
  const MetricReport report = evaluate(make_eval_pair(pred, scene), scene.intrinsics, mc);
  std::cout << io::metric_table(report);
  if (a.out) write_text(*a.out, io::to_json(report).dump(2) + "\n");
  return kExitOk;
}

int run_gradcheck(bool full) {
  bool ok = true;
  for (const auto& r : gradcheck::run_suite(full)) {
    std::cout << (r.passed ? "ok   " : "FAIL ") << r.name << "  max rel err " << r.max_rel_error << " at "
              << r.worst_location << " (" << r.checked << " coords)";
    if (!r.failure.empty()) std::cout << "  " << r.failure;
    std::cout << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitFailure;
}

struct TrainArgs {
  std::optional<std::string> scene;
  int steps = 500;
  std::uint64_t seed = 0;
  std::string out;
  std::optional<std::string> loss_csv;
  std::string config = "toy";
  std::optional<double> lr;
};

int run_train(const TrainArgs& a) {
  const ModelConfig cfg = preset(a.config);
  SceneBundle scene;
  if (a.scene) {
    scene = io::load_scene(*a.scene);
  } else {
    SceneSpec spec;
    spec.seed = a.seed;
    scene = generate(spec).bundle;
  }
  require(scene.ground_truth.has_value(), ErrorCode::kShape, "training scene has no ground-truth tracks");
  const TrackerModel<float> model(cfg);
  ParamStore<float> params = model.init_params(a.seed);
  require(a.steps > 0, ErrorCode::kConfig, "--steps must be positive");
  const TrainConfig tc = a.lr ? toy_train_config(a.steps, *a.lr) : toy_train_config(a.steps);
  std::vector<double> losses;
  try {
    train_toy(model, params, {scene}, a.steps, tc, a.seed, [&](int step, double loss) {
      losses.push_back(loss);
      if (step % 50 == 0 || step + 1 == a.steps) std::cout << "step " << step << "  loss " << loss << "\n";
    });
  } catch (const Error& e) {
    write_text(a.loss_csv.value_or(a.out + ".loss.csv"), io::loss_csv(losses));
    throw;
  }
  io::save_checkpoint(a.out, cfg, params, a.seed);
  write_text(a.loss_csv.value_or(a.out + ".loss.csv"), io::loss_csv(losses));
  write_run_manifest(a.out + ".run.json", "train-toy", a.seed, io::config_hash(cfg));
  std::cout << "wrote checkpoint " << a.out << "\n";
  return kExitOk;
}

int run_export(const std::string& pred, const std::string& out) {
  write_text(out, io::trajectories_ply(io::load_result(pred)));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D point tracking toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic scene with ground truth");
  c_synth->add_option("--spec", synth.spec, "scene spec JSON (fields optional)")->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out, "output scene directory")->required();
  c_synth->add_option("--seed", synth.seed, "random seed");
  c_synth->add_flag("--verify", synth.verify, "check ground-truth reprojection before writing");
  c_synth->add_flag("--two-plane", synth.two_plane, "use the two-plane layout");

  TrackArgs track;
  auto* c_track = app.add_subcommand("track", "track the scene's queries");
  c_track->add_option("--scene", track.scene, "scene directory")->required();
  c_track->add_option("--mode", track.mode, "uvd | uvlogd | camera | world");
  c_track->add_option("--output-mode", track.output_mode, "coordinates of the written tracks (default: --mode)");
  c_track->add_option("--neighbors", track.neighbors, "knn3d | fixed2d");
  c_track->add_option("--attention", track.attention, "n2n | p2n");
  c_track->add_option("--config", track.config, "toy | desk | tiny");
  c_track->add_option("--ckpt", track.ckpt, "checkpoint file (default: seeded random init)");
  c_track->add_option("--support-grid", track.support_grid, "n for an n x n grid of auxiliary queries");
  c_track->add_flag("--bidirectional", track.bidirectional, "also track backwards from each query frame");
  c_track->add_option("--iterations", track.iterations, "refinement iterations per window");
  c_track->add_option("--out", track.out, "output result file")->required();
  c_track->add_option("--seed", track.seed, "random seed");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score a tracking result against ground truth");
  c_eval->add_option("--pred", ev.pred, "result file")->required();
  c_eval->add_option("--scene", ev.scene, "scene directory")->required();
  c_eval->add_option("--out", ev.out, "metric report JSON");
  c_eval->add_flag("--exclude-query-frame", ev.exclude_query_frame, "skip each track's query frame");

  bool full = false;
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  c_grad->add_flag("--full", full, "include the encoder, whole-model and training-loss checks");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train-toy", "overfit the toy model on one scene");
  c_train->add_option("--scene", train.scene, "scene directory (default: reference synthetic scene)");
  c_train->add_option("--steps", train.steps, "optimizer steps");
  c_train->add_option("--seed", train.seed, "random seed");
  c_train->add_option("--out", train.out, "checkpoint file")->required();
  c_train->add_option("--loss-csv", train.loss_csv, "loss CSV (default: <out>.loss.csv)");
  c_train->add_option("--config", train.config, "toy | desk | tiny");
  c_train->add_option("--lr", train.lr, "learning rate");

  std::string ply_pred, ply_out;
  auto* c_ply = app.add_subcommand("export-ply", "write trajectories as an ASCII PLY");
  c_ply->add_option("--pred", ply_pred, "result file")->required();
  c_ply->add_option("--out", ply_out, "PLY file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_track) return run_track(track);
    if (*c_eval) return run_eval(ev);
    if (*c_grad) return run_gradcheck(full);
    if (*c_train) return run_train(train);
    if (*c_ply) return run_export(ply_pred, ply_out);
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == ErrorCode::kDivergence) return kExitDivergence;
    if (e.code() == ErrorCode::kInternal) return kExitFailure;
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
