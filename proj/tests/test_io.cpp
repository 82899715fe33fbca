#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "tapip3d.hpp"

namespace tapip3d {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tapip3d_test_" + name);
  fs::remove_all(p);
  return p;
}

SceneBundle scene() {
  SceneSpec spec = gradcheck::tiny_scene_spec(1);
  spec.queries = 4;
  return generate(spec).bundle;
}

TEST(Io, Crc32KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(io::crc32(std::vector<std::uint8_t>(s.begin(), s.end())), 0xCBF43926u);
}

TEST(Io, SceneRoundTripIsByteIdentical) {
  const SceneBundle a = scene();
  const fs::path d1 = scratch("scene1"), d2 = scratch("scene2");
  io::save_scene(d1, a);
  const SceneBundle b = io::load_scene(d1);
  EXPECT_EQ(b.pointmap, a.pointmap);
  EXPECT_EQ(b.rgb, a.rgb);
  EXPECT_EQ(b.valid, a.valid);
  EXPECT_EQ(b.queries, a.queries);
  EXPECT_EQ(b.ground_truth->tracks, a.ground_truth->tracks);
  EXPECT_EQ(b.poses->size(), a.poses->size());
  EXPECT_EQ(b.poses->back().to_row_major(), a.poses->back().to_row_major());
  io::save_scene(d2, b);
  for (const auto& entry : fs::directory_iterator(d1))
    EXPECT_EQ(io::detail::read_file(entry.path()), io::detail::read_file(d2 / entry.path().filename()))
        << entry.path().filename();
}

TEST(Io, CorruptedTensorFailsChecksum) {
  const fs::path d = scratch("corrupt");
  io::save_scene(d, scene());
  auto bytes = io::detail::read_file(d / "pointmap.bin");
  bytes[17] ^= 0x40;
  io::detail::write_file(d / "pointmap.bin", bytes);
  try {
    io::load_scene(d);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kChecksum);
  }
  bytes.pop_back();
  io::detail::write_file(d / "pointmap.bin", bytes);
  EXPECT_THROW(io::load_scene(d), Error);
}

TrackingResult tracked() {
  TrackerModel<float> model(ModelConfig::tiny());
  const auto params = model.init_params(3);
  TrackOptions opt;
  opt.output_mode = CoordinateSystem::kXYZWorld;
  return track_video(model, params, scene(), opt);
}

TEST(Io, ResultRoundTripAndProjectionCheck) {
  const TrackingResult r = tracked();
  const auto bytes = io::encode_result(r);
  const TrackingResult back = io::decode_result(bytes);
  EXPECT_EQ(back.positions, r.positions);
  EXPECT_EQ(back.pixels, r.pixels);
  EXPECT_EQ(back.valid, r.valid);
  EXPECT_EQ(back.system, CoordinateSystem::kXYZWorld);
  EXPECT_EQ(io::encode_result(back), bytes);
  EXPECT_LT(io::projection_residual(r), 1e-3);

  TrackingResult bad = r;
  for (std::size_t i = 0; i < bad.valid.size(); ++i)
    if (bad.valid[i]) {
      bad.pixels[i * 2] += 1.0f;
      break;
    }
  try {
    io::decode_result(io::encode_result(bad));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
}

TEST(Io, ContainerRejectsWrongSchemaAndTrailingBytes) {
  auto bytes = io::encode_result(tracked());
  EXPECT_THROW(io::decode_container(bytes, io::kCheckpointSchema), Error);
  bytes.push_back(0);
  EXPECT_THROW(io::decode_result(bytes), Error);
  EXPECT_THROW(io::decode_result(std::vector<std::uint8_t>(10, 0)), Error);
}

TEST(Io, CheckpointRoundTripAndMismatch) {
  const ModelConfig cfg = ModelConfig::tiny();
  TrackerModel<float> model(cfg);
  const auto params = model.init_params(5);
  const auto bytes = io::encode_checkpoint(cfg, params, 5);
  auto loaded = model.init_params(6);
  const auto info = io::decode_checkpoint(bytes, cfg, loaded);
  EXPECT_EQ(info.seed, 5u);
  EXPECT_EQ(io::config_hash(info.config), io::config_hash(cfg));
  for (std::size_t i = 0; i < params.entries().size(); ++i)
    EXPECT_TRUE(std::ranges::equal(loaded.entries()[i].value.data(), params.entries()[i].value.data()));
  EXPECT_EQ(io::encode_checkpoint(cfg, loaded, 5), bytes);

  ModelConfig other = cfg;
  other.refiner.virtual_tracks = 3;
  auto wrong = TrackerModel<float>(other).init_params(0);
  try {
    io::decode_checkpoint(bytes, other, wrong);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(Io, ModelConfigJsonRoundTrip) {
  for (const ModelConfig& c : {ModelConfig::tiny(), ModelConfig::toy(), ModelConfig::desk()}) {
    const ModelConfig back = io::model_config_from_json(io::to_json(c));
    EXPECT_EQ(io::to_json(back).dump(), io::to_json(c).dump());
    EXPECT_EQ(io::config_hash(back), io::config_hash(c));
  }
  EXPECT_NE(io::config_hash(ModelConfig::tiny()), io::config_hash(ModelConfig::toy()));
  EXPECT_THROW(io::model_config_from_json(io::Json::parse(R"({"window": "x"})")), Error);
}

TEST(Io, SceneSpecFromJson) {
  const auto spec = io::scene_spec_from_json(io::Json::parse(R"({"frames": 10, "queries": 5, "seed": 3})"));
  EXPECT_EQ(spec.frames, 10);
  EXPECT_EQ(spec.queries, 5);
  EXPECT_EQ(spec.seed, 3u);
  EXPECT_EQ(spec.points_per_body, SceneSpec{}.points_per_body);
}

TEST(Io, TextExports) {
  EXPECT_EQ(io::loss_csv({1.5, 0.25}), "step,loss\n0,1.5\n1,0.25\n");
  const TrackingResult r = tracked();
  const std::string ply = io::trajectories_ply(r);
  EXPECT_EQ(ply.rfind("ply\n", 0), 0u);
  EXPECT_NE(ply.find("element vertex"), std::string::npos);
  const auto j = io::to_json(evaluate(make_eval_pair(keep_first_queries(r, r.queries), scene()), scene().intrinsics));
  EXPECT_EQ(j.begin().key(), "aj_3d");
}

}  // namespace
}  // namespace tapip3d
