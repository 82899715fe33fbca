#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tapip3d/error.hpp"
#include "tapip3d/geometry.hpp"
#include "tapip3d/metrics.hpp"
#include "tapip3d/model.hpp"
#include "tapip3d/pipeline.hpp"
#include "tapip3d/scene.hpp"
#include "tapip3d/synthetic.hpp"
#include "tapip3d/tensor.hpp"

namespace tapip3d::io {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kSceneSchema = "tapip3d.scene/1";
inline constexpr const char* kResultSchema = "tapip3d.result/1";
inline constexpr const char* kCheckpointSchema = "tapip3d.checkpoint/1";
inline constexpr char kMagic[8] = {'T', 'A', 'P', 'I', 'P', '3', 'D', '\0'};

inline std::uint32_t crc32(const std::vector<std::uint8_t>& bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    c = ::crc32(c, bytes.data() + done, n);
    done += n;
  }
  return static_cast<std::uint32_t>(c);
}

/// Raw little-endian payload of a tensor.
struct Blob {
  std::string dtype;  // "u8", "f32", "f64"
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t elements() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "u8") return 1;
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  fail(ErrorCode::kFormat, "unknown dtype '" + dtype + "'");
}

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kFormat, "cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kFormat, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kFormat, "short write to " + path.string());
}

}  // namespace detail

template <typename Range>
Blob make_blob(const std::string& dtype, std::vector<std::size_t> shape, const Range& values) {
  Blob b{dtype, std::move(shape), {}};
  require(b.elements() == values.size(), ErrorCode::kShape, "blob shape does not match data");
  b.bytes.reserve(values.size() * dtype_size(dtype));
  for (const auto& v : values) {
    if (dtype == "u8") detail::put_le<std::uint8_t>(b.bytes, static_cast<std::uint8_t>(v));
    else if (dtype == "f32") detail::put_le<float>(b.bytes, static_cast<float>(v));
    else detail::put_le<double>(b.bytes, static_cast<double>(v));
  }
  return b;
}

template <typename T>
std::vector<T> blob_values(const Blob& b) {
  const std::size_t n = b.elements(), w = dtype_size(b.dtype);
  require(b.bytes.size() == n * w, ErrorCode::kFormat, "tensor byte size does not match its shape");
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = b.bytes.data() + i * w;
    if (b.dtype == "u8") out[i] = static_cast<T>(*p);
    else if (b.dtype == "f32") out[i] = static_cast<T>(detail::get_le<float>(p));
    else out[i] = static_cast<T>(detail::get_le<double>(p));
  }
  return out;
}

inline Json tensor_entry(const Blob& b, std::size_t offset, const std::optional<std::string>& file) {
  Json e;
  e["dtype"] = b.dtype;
  e["shape"] = b.shape;
  if (file) e["file"] = *file;
  e["offset"] = offset;
  e["crc32"] = crc32(b.bytes);
  return e;
}

inline Blob read_entry(const std::string& name, const Json& e, const std::vector<std::uint8_t>& data, std::size_t base) {
  Blob b;
  try {
    b.dtype = e.at("dtype").get<std::string>();
    b.shape = e.at("shape").get<std::vector<std::size_t>>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t size = b.elements() * dtype_size(b.dtype);
    require(base + offset + size <= data.size(), ErrorCode::kFormat,
            "tensor '" + name + "' extends past the end of its file");
    if (e.contains("file"))
      require(base + offset + size == data.size(), ErrorCode::kFormat,
              "tensor '" + name + "' shape does not match its file size");
    b.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(base + offset),
                   data.begin() + static_cast<std::ptrdiff_t>(base + offset + size));
    if (crc32(b.bytes) != e.at("crc32").get<std::uint32_t>())
      fail(ErrorCode::kChecksum, "checksum mismatch in tensor '" + name + "'");
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kFormat, "malformed entry for tensor '" + name + "': " + ex.what());
  }
  return b;
}

// ---------------------------------------------------------------- containers

/// Single-file container: magic, u64 manifest length, manifest JSON, data.
/// Tensor offsets in the manifest are relative to the start of the data.
struct Container {
  Json manifest;
  std::map<std::string, Blob> tensors;
};

inline std::vector<std::uint8_t> encode_container(Json manifest, const std::vector<std::pair<std::string, Blob>>& tensors) {
  std::vector<std::uint8_t> data;
  Json registry = Json::object();
  for (const auto& [name, blob] : tensors) {
    registry[name] = tensor_entry(blob, data.size(), std::nullopt);
    data.insert(data.end(), blob.bytes.begin(), blob.bytes.end());
  }
  manifest["tensors"] = registry;
  const std::string text = manifest.dump(2);
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  detail::put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

inline Container decode_container(const std::vector<std::uint8_t>& bytes, const std::string& schema) {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kMagic, 8) == 0, ErrorCode::kFormat, "not a container file");
  const auto len = detail::get_le<std::uint64_t>(bytes.data() + 8);
  require(16 + len <= bytes.size(), ErrorCode::kFormat, "truncated container manifest");
  Container c;
  try {
    c.manifest = Json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(16 + len));
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kFormat, std::string("malformed container manifest: ") + ex.what());
  }
  require(c.manifest.value("schema_version", std::string()) == schema, ErrorCode::kFormat,
          "expected schema '" + schema + "', found '" + c.manifest.value("schema_version", std::string("?")) + "'");
  std::size_t expected = 16 + len;
  for (const auto& [name, e] : c.manifest.at("tensors").items()) {
    c.tensors[name] = read_entry(name, e, bytes, 16 + len);
    expected = std::max(expected, 16 + len + e.at("offset").get<std::size_t>() + c.tensors[name].bytes.size());
  }
  require(expected == bytes.size(), ErrorCode::kFormat, "trailing bytes after container data");
  return c;
}

// ---------------------------------------------------------------- JSON pieces

inline Json to_json(const CameraIntrinsics& k) {
  return Json{{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline CameraIntrinsics intrinsics_from_json(const Json& j) {
  CameraIntrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  k.validate();
  return k;
}

inline Json poses_to_json(const std::vector<RigidTransform>& poses) {
  Json out = Json::array();
  for (const auto& p : poses) {
    const auto a = p.to_row_major();
    out.push_back(std::vector<double>(a.begin(), a.end()));
  }
  return out;
}

inline std::vector<RigidTransform> poses_from_json(const Json& j) {
  std::vector<RigidTransform> out;
  for (const auto& e : j) {
    const auto v = e.get<std::vector<double>>();
    require(v.size() == 12, ErrorCode::kFormat, "a pose needs 12 numbers");
    out.push_back(RigidTransform::from_row_major(v));
  }
  return out;
}

inline Json to_json(const ModelConfig& c) {
  return Json{
      {"encoder", {{"channels", c.encoder.channels}, {"stride", c.encoder.stride}, {"blocks", c.encoder.blocks}}},
      {"levels", c.levels},
      {"neighbors",
       {{"mode", to_string(c.neighbors.mode)}, {"k", c.neighbors.k}, {"window_radius", c.neighbors.window_radius}}},
      {"attention",
       {{"channels", c.attention.channels},
        {"heads", c.attention.heads},
        {"blocks", c.attention.blocks},
        {"mlp_ratio", c.attention.mlp_ratio},
        {"fourier_bands", c.attention.fourier_bands},
        {"offset_bias", c.attention.offset_bias},
        {"mode", to_string(c.attention.mode)}}},
      {"refiner",
       {{"layers", c.refiner.layers},
        {"heads", c.refiner.heads},
        {"width", c.refiner.width},
        {"virtual_tracks", c.refiner.virtual_tracks},
        {"iterations", c.refiner.iterations},
        {"mlp_ratio", c.refiner.mlp_ratio},
        {"time_bands", c.refiner.time_bands}}},
      {"window", c.window},
      {"token_bands", c.token_bands}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  try {
    const auto& e = j.at("encoder");
    c.encoder = {e.at("channels").get<int>(), e.at("stride").get<int>(), e.at("blocks").get<int>()};
    c.levels = j.at("levels").get<int>();
    const auto& n = j.at("neighbors");
    c.neighbors = {parse_neighbor_mode(n.at("mode").get<std::string>()), n.at("k").get<int>(),
                   n.at("window_radius").get<int>()};
    const auto& a = j.at("attention");
    c.attention = {a.at("channels").get<int>(), a.at("heads").get<int>(), a.at("blocks").get<int>(),
                   a.at("mlp_ratio").get<int>(), a.at("fourier_bands").get<int>(), a.at("offset_bias").get<bool>(),
                   parse_attention_mode(a.at("mode").get<std::string>())};
    const auto& r = j.at("refiner");
    c.refiner = {r.at("layers").get<int>(),     r.at("heads").get<int>(),     r.at("width").get<int>(),
                 r.at("virtual_tracks").get<int>(), r.at("iterations").get<int>(), r.at("mlp_ratio").get<int>(),
                 r.at("time_bands").get<int>()};
    c.window = j.at("window").get<int>();
    c.token_bands = j.at("token_bands").get<int>();
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kConfig, std::string("malformed model config: ") + ex.what());
  }
  c.validate();
  return c;
}

/// CRC-32 of the canonical config JSON, as 8 hex digits.
inline std::string config_hash(const ModelConfig& c) {
  const std::string text = to_json(c).dump();
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc32(bytes);
  return os.str();
}

inline Json run_manifest(const ModelConfig& c, std::uint64_t seed, const std::string& command) {
  return Json{{"command", command}, {"seed", seed}, {"config_hash", config_hash(c)}, {"version", kVersion}};
}

// ---------------------------------------------------------------- scene bundle

inline void save_scene(const fs::path& dir, const SceneBundle& s) {
  s.validate();
  fs::create_directories(dir);
  const std::size_t S = s.frames, H = s.height, W = s.width;
  std::vector<std::pair<std::string, Blob>> tensors;
  if (s.has_rgb()) tensors.emplace_back("rgb", make_blob("u8", {S, H, W, 3}, s.rgb));
  tensors.emplace_back("pointmap", make_blob("f32", {S, H, W, 3}, s.pointmap));
  tensors.emplace_back("valid", make_blob("u8", {S, H, W}, s.valid));
  if (s.features) {
    const auto& f = *s.features;
    tensors.emplace_back("features",
                         make_blob("f32", {S, std::size_t(f.height), std::size_t(f.width), std::size_t(f.channels)}, f.data));
  }
  const std::size_t Q = s.query_count();
  if (s.ground_truth) {
    tensors.emplace_back("gt_tracks", make_blob("f32", {Q, S, 3}, s.ground_truth->tracks));
    tensors.emplace_back("gt_vis", make_blob("u8", {Q, S}, s.ground_truth->visible));
    tensors.emplace_back("gt_valid", make_blob("u8", {Q, S}, s.ground_truth->valid));
  }
  tensors.emplace_back("queries", make_blob("f32", {Q, 4}, s.queries));

  Json m;
  m["schema_version"] = kSceneSchema;
  m["S"] = s.frames;
  m["W"] = s.width;
  m["H"] = s.height;
  m["intrinsics"] = to_json(s.intrinsics);
  if (s.poses) m["poses"] = poses_to_json(*s.poses);
  Json registry = Json::object();
  for (const auto& [name, blob] : tensors) {
    const std::string file = name + ".bin";
    registry[name] = tensor_entry(blob, 0, file);
    detail::write_file(dir / file, blob.bytes);
  }
  m["tensors"] = registry;
  const std::string text = m.dump(2) + "\n";
  detail::write_file(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline SceneBundle load_scene(const fs::path& dir) {
  const auto text = detail::read_file(dir / "manifest.json");
  Json m;
  try {
    m = Json::parse(text.begin(), text.end());
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kFormat, std::string("malformed scene manifest: ") + ex.what());
  }
  require(m.value("schema_version", std::string()) == kSceneSchema, ErrorCode::kFormat,
          "unsupported scene schema '" + m.value("schema_version", std::string("?")) + "'");
  SceneBundle s;
  std::map<std::string, Blob> t;
  try {
    s.frames = m.at("S").get<int>();
    s.width = m.at("W").get<int>();
    s.height = m.at("H").get<int>();
    s.intrinsics = intrinsics_from_json(m.at("intrinsics"));
    if (m.contains("poses")) s.poses = poses_from_json(m.at("poses"));
    for (const auto& [name, e] : m.at("tensors").items())
      t[name] = read_entry(name, e, detail::read_file(dir / e.at("file").get<std::string>()), 0);
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kFormat, std::string("malformed scene manifest: ") + ex.what());
  }
  const std::size_t S = s.frames, H = s.height, W = s.width;
  auto need = [&](const std::string& name, const std::string& dtype, std::vector<std::size_t> shape) -> const Blob& {
    require(t.count(name) > 0, ErrorCode::kFormat, "scene is missing tensor '" + name + "'");
    const Blob& b = t.at(name);
    require(b.dtype == dtype && b.shape == shape, ErrorCode::kShape, "tensor '" + name + "' has unexpected dtype/shape");
    return b;
  };
  if (t.count("rgb")) s.rgb = blob_values<std::uint8_t>(need("rgb", "u8", {S, H, W, 3}));
  s.pointmap = blob_values<float>(need("pointmap", "f32", {S, H, W, 3}));
  s.valid = blob_values<std::uint8_t>(need("valid", "u8", {S, H, W}));
  if (t.count("features")) {
    const Blob& b = t.at("features");
    require(b.dtype == "f32" && b.shape.size() == 4 && b.shape[0] == S, ErrorCode::kShape, "bad features tensor");
    s.features = FeatureTensor{int(b.shape[1]), int(b.shape[2]), int(b.shape[3]), blob_values<float>(b)};
  }
  require(t.count("queries") && t.at("queries").shape.size() == 2, ErrorCode::kFormat, "scene needs queries [Q, 4]");
  const std::size_t Q = t.at("queries").shape[0];
  s.queries = blob_values<float>(need("queries", "f32", {Q, 4}));
  if (t.count("gt_tracks")) {
    GroundTruth gt;
    gt.queries = static_cast<int>(Q);
    gt.tracks = blob_values<float>(need("gt_tracks", "f32", {Q, S, 3}));
    gt.visible = blob_values<std::uint8_t>(need("gt_vis", "u8", {Q, S}));
    gt.valid = t.count("gt_valid") ? blob_values<std::uint8_t>(need("gt_valid", "u8", {Q, S}))
                                   : std::vector<std::uint8_t>(Q * S, 1);
    s.ground_truth = std::move(gt);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------- tracking result

inline std::vector<std::uint8_t> encode_result(const TrackingResult& r) {
  const std::size_t Q = r.queries, S = r.frames;
  Json m;
  m["schema_version"] = kResultSchema;
  m["coordinate_system"] = std::string(to_string(r.system));
  m["sigma"] = r.sigma;
  m["intrinsics"] = to_json(r.intrinsics);
  if (!r.poses.empty()) m["poses"] = poses_to_json(r.poses);
  return encode_container(m, {{"positions", make_blob("f32", {Q, S, 3}, r.positions)},
                              {"visibility", make_blob("u8", {Q, S}, r.visibility)},
                              {"pixels", make_blob("f32", {Q, S, 2}, r.pixels)},
                              {"valid", make_blob("u8", {Q, S}, r.valid)}});
}

/// Largest gap between stored pixels and the projection of stored positions.
inline double projection_residual(const TrackingResult& r) {
  double worst = 0.0;
  for (int q = 0; q < r.queries; ++q) {
    for (int s = 0; s < r.frames; ++s) {
      if (!r.valid[r.index(q, s)]) continue;
      std::optional<RigidTransform> pose;
      if (!r.poses.empty()) pose = r.poses[s];
      const Vec3 cam = convert_coords(r.position(q, s), r.system, CoordinateSystem::kXYZCamera, r.intrinsics, pose);
      worst = std::max(worst, (project(cam, r.intrinsics).uv - r.pixel(q, s)).norm());
    }
  }
  return worst;
}

inline TrackingResult decode_result(const std::vector<std::uint8_t>& bytes, double projection_tolerance = 1e-3) {
  const Container c = decode_container(bytes, kResultSchema);
  TrackingResult r;
  try {
    r.system = parse_coordinate_system(c.manifest.at("coordinate_system").get<std::string>());
    r.sigma = c.manifest.at("sigma").get<double>();
    r.intrinsics = intrinsics_from_json(c.manifest.at("intrinsics"));
    if (c.manifest.contains("poses")) r.poses = poses_from_json(c.manifest.at("poses"));
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kFormat, std::string("malformed result manifest: ") + ex.what());
  }
  require(c.tensors.count("positions") && c.tensors.at("positions").shape.size() == 3, ErrorCode::kFormat,
          "result needs positions [Q, S, 3]");
  const auto& shp = c.tensors.at("positions").shape;
  r.queries = static_cast<int>(shp[0]);
  r.frames = static_cast<int>(shp[1]);
  auto get = [&](const std::string& name, const std::string& dtype, std::vector<std::size_t> shape) -> const Blob& {
    require(c.tensors.count(name) > 0, ErrorCode::kFormat, "result is missing tensor '" + name + "'");
    const Blob& b = c.tensors.at(name);
    require(b.dtype == dtype && b.shape == shape, ErrorCode::kShape, "tensor '" + name + "' has unexpected dtype/shape");
    return b;
  };
  const std::size_t Q = r.queries, S = r.frames;
  r.positions = blob_values<float>(get("positions", "f32", {Q, S, 3}));
  r.visibility = blob_values<std::uint8_t>(get("visibility", "u8", {Q, S}));
  r.pixels = blob_values<float>(get("pixels", "f32", {Q, S, 2}));
  r.valid = blob_values<std::uint8_t>(get("valid", "u8", {Q, S}));
  require(r.poses.empty() || static_cast<int>(r.poses.size()) == r.frames, ErrorCode::kShape, "one pose per frame");
  require(projection_residual(r) <= projection_tolerance, ErrorCode::kFormat,
          "stored pixels disagree with stored positions");
  return r;
}

inline void save_result(const fs::path& path, const TrackingResult& r) { detail::write_file(path, encode_result(r)); }
inline TrackingResult load_result(const fs::path& path) { return decode_result(detail::read_file(path)); }

// ---------------------------------------------------------------- checkpoints

template <typename S>
std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config, const ParamStore<S>& params, std::uint64_t seed) {
  Json m;
  m["schema_version"] = kCheckpointSchema;
  m["config"] = to_json(config);
  m["config_hash"] = config_hash(config);
  m["seed"] = seed;
  m["version"] = kVersion;
  const std::string dtype = sizeof(S) == 4 ? "f32" : "f64";
  std::vector<std::pair<std::string, Blob>> tensors;
  for (const auto& e : params.entries()) tensors.emplace_back(e.name, make_blob(dtype, e.value.shape(), e.value.data()));
  return encode_container(m, tensors);
}

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t seed = 0;
};

/// Loads parameters into `params` (already declared for `expected`); any
/// config or parameter-set difference is a config error.
template <typename S>
CheckpointInfo decode_checkpoint(const std::vector<std::uint8_t>& bytes, const ModelConfig& expected,
                                 ParamStore<S>& params) {
  const Container c = decode_container(bytes, kCheckpointSchema);
  CheckpointInfo info;
  info.config = model_config_from_json(c.manifest.at("config"));
  info.seed = c.manifest.value("seed", std::uint64_t{0});
  require(config_hash(info.config) == config_hash(expected), ErrorCode::kConfig,
          "checkpoint config " + config_hash(info.config) + " does not match model config " + config_hash(expected));
  require(c.tensors.size() == params.entries().size(), ErrorCode::kConfig, "checkpoint parameter set differs");
  for (auto& e : params.entries()) {
    require(c.tensors.count(e.name) > 0, ErrorCode::kConfig, "checkpoint lacks parameter '" + e.name + "'");
    const Blob& b = c.tensors.at(e.name);
    require(b.shape == e.value.shape(), ErrorCode::kConfig, "parameter '" + e.name + "' has a different shape");
    const auto v = blob_values<S>(b);
    std::copy(v.begin(), v.end(), e.value.data().begin());
  }
  return info;
}

template <typename S>
void save_checkpoint(const fs::path& path, const ModelConfig& config, const ParamStore<S>& params, std::uint64_t seed) {
  detail::write_file(path, encode_checkpoint(config, params, seed));
}

template <typename S>
CheckpointInfo load_checkpoint(const fs::path& path, const ModelConfig& expected, ParamStore<S>& params) {
  return decode_checkpoint(detail::read_file(path), expected, params);
}

// ---------------------------------------------------------------- metrics

inline Json to_json(const MetricReport& r) {
  auto breakdown = [](const std::vector<ThresholdScore>& v) {
    Json a = Json::array();
    for (const auto& s : v) a.push_back(Json{{"threshold", s.threshold}, {"within", s.within}, {"jaccard", s.jaccard}});
    return a;
  };
  return Json{{"aj_3d", r.aj_3d},
              {"apd_3d", r.apd_3d},
              {"oa", r.oa},
              {"aj_2d", r.aj_2d},
              {"apd_2d", r.apd_2d},
              {"per_fraction_3d", breakdown(r.per_fraction_3d)},
              {"per_threshold_2d", breakdown(r.per_threshold_2d)},
              {"evaluated_points", r.evaluated_points},
              {"visible_points", r.visible_points}};
}

inline std::string metric_table(const MetricReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "metric   value\n";
  os << "AJ3D   " << std::setw(7) << r.aj_3d << "\n";
  os << "APD3D  " << std::setw(7) << r.apd_3d << "\n";
  os << "OA     " << std::setw(7) << r.oa << "\n";
  os << "AJ2D   " << std::setw(7) << r.aj_2d << "\n";
  os << "APD2D  " << std::setw(7) << r.apd_2d << "\n";
  os << "points " << r.evaluated_points << " (visible " << r.visible_points << ")\n";
  return os.str();
}

// ---------------------------------------------------------------- synthetic spec

inline Vec3 vec3_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  require(v.size() == 3, ErrorCode::kConfig, "expected a 3-vector");
  return {v[0], v[1], v[2]};
}

/// Every field is optional; missing fields keep their defaults.
inline SceneSpec scene_spec_from_json(const Json& j) {
  SceneSpec s;
  try {
    s.frames = j.value("frames", s.frames);
    if (j.contains("intrinsics")) s.intrinsics = intrinsics_from_json(j.at("intrinsics"));
    s.bodies = j.value("bodies", s.bodies);
    s.points_per_body = j.value("points_per_body", s.points_per_body);
    s.background = j.value("background", s.background);
    s.background_depth = j.value("background_depth", s.background_depth);
    if (j.contains("camera_linear")) s.camera_linear = vec3_from_json(j.at("camera_linear"));
    if (j.contains("camera_angular")) s.camera_angular = vec3_from_json(j.at("camera_angular"));
    s.body_speed = j.value("body_speed", s.body_speed);
    s.body_spin = j.value("body_spin", s.body_spin);
    s.splat_radius = j.value("splat_radius", s.splat_radius);
    s.surface_epsilon = j.value("surface_epsilon", s.surface_epsilon);
    s.near_plane = j.value("near_plane", s.near_plane);
    s.queries = j.value("queries", s.queries);
    s.query_frame_max = j.value("query_frame_max", s.query_frame_max);
    s.palindrome = j.value("palindrome", s.palindrome);
    s.seed = j.value("seed", s.seed);
    if (j.contains("body_list")) {
      for (const auto& b : j.at("body_list")) {
        BodySpec body;
        const std::string shape = b.value("shape", std::string("ellipsoid"));
        require(shape == "ellipsoid" || shape == "plane", ErrorCode::kConfig, "unknown body shape '" + shape + "'");
        body.shape = shape == "plane" ? BodyShape::kPlane : BodyShape::kEllipsoid;
        if (b.contains("extent")) body.extent = vec3_from_json(b.at("extent"));
        if (b.contains("center")) body.center = vec3_from_json(b.at("center"));
        if (b.contains("orientation")) body.orientation = vec3_from_json(b.at("orientation"));
        if (b.contains("linear")) body.linear = vec3_from_json(b.at("linear"));
        if (b.contains("angular")) body.angular = vec3_from_json(b.at("angular"));
        if (b.contains("color")) body.color = vec3_from_json(b.at("color"));
        body.points = b.value("points", body.points);
        s.body_list.push_back(body);
      }
    }
  } catch (const Json::exception& ex) {
    fail(ErrorCode::kConfig, std::string("malformed scene spec: ") + ex.what());
  }
  s.intrinsics.validate();
  s.validate();
  return s;
}

// ---------------------------------------------------------------- exports

/// ASCII PLY: one vertex per valid (query, frame), edges along each track.
inline std::string trajectories_ply(const TrackingResult& r) {
  std::vector<std::string> vertices;
  std::vector<std::pair<int, int>> edges;
  std::ostringstream v;
  v << std::setprecision(9);
  for (int q = 0; q < r.queries; ++q) {
    int prev = -1;
    const int red = (q * 97) % 256, green = (q * 57 + 80) % 256, blue = (q * 31 + 160) % 256;
    for (int s = 0; s < r.frames; ++s) {
      if (!r.valid[r.index(q, s)]) {
        prev = -1;
        continue;
      }
      const Vec3 p = r.position(q, s);
      std::ostringstream line;
      line << std::setprecision(9) << p.x() << " " << p.y() << " " << p.z() << " " << red << " " << green << " " << blue;
      const int id = static_cast<int>(vertices.size());
      vertices.push_back(line.str());
      if (prev >= 0) edges.emplace_back(prev, id);
      prev = id;
    }
  }
  std::ostringstream os;
  os << "ply\nformat ascii 1.0\n";
  os << "element vertex " << vertices.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "element edge " << edges.size() << "\nproperty int vertex1\nproperty int vertex2\nend_header\n";
  for (const auto& line : vertices) os << line << "\n";
  for (const auto& [a, b] : edges) os << a << " " << b << "\n";
  return os.str();
}

inline std::string loss_csv(const std::vector<double>& losses) {
  std::ostringstream os;
  os << "step,loss\n" << std::setprecision(10);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << "," << losses[i] << "\n";
  return os.str();
}

}  // namespace tapip3d::io
