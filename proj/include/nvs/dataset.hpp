#pragma once

// Synthetic dataset generation and the on-disk dataset format.
//
//   <root>/manifest.json              format/version, image size, scenes, pair list
//   <root>/scene_####/meta.json       intrinsics + per-view pose and depth scale
//   <root>/scene_####/view_###.png    8-bit RGB
//   <root>/scene_####/depth_###.png   16-bit gray, value = round(depth / depth_scale * 65535)
//   <root>/scene_####/vis_SSS_TTT.png 8-bit gray visibility of target TTT pixels in source SSS
//
// Poses are world-to-camera [R|t]: "rotation" (9 values, row-major) and
// "translation" (3 values). Depth and visibility files are optional on load.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "nvs/geometry.hpp"
#include "nvs/image_io.hpp"
#include "nvs/render.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

inline constexpr int kDatasetFormatVersion = 1;

enum class Pairing { orbit, sequence };

inline const char* pairing_name(Pairing p) { return p == Pairing::orbit ? "orbit" : "sequence"; }

inline Pairing parse_pairing(const std::string& s) {
  if (s == "orbit") return Pairing::orbit;
  if (s == "sequence") return Pairing::sequence;
  throw std::invalid_argument("unknown pairing '" + s + "' (expected orbit or sequence)");
}

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct DatasetSpec {
  std::size_t num_scenes = 20;
  // The last `test_scenes` scenes are held out.
  std::size_t test_scenes = 0;
  Pairing pairing = Pairing::orbit;
  std::size_t width = 64, height = 64;
  std::uint64_t seed = 0;
  // Orbit protocol: azimuth grid, elevation set, pairs within the azimuth gap.
  double azimuth_step = 20.0;
  std::vector<double> elevations{0.0, 10.0, 20.0};
  double max_azimuth_gap = 40.0;
  double radius = 4.0;
  // Sequence protocol: frames along a translating path, pairs within the frame gap.
  std::size_t frames = 20;
  std::size_t max_frame_gap = 7;

  std::size_t azimuth_count() const { return static_cast<std::size_t>(std::lround(360.0 / azimuth_step)); }

  std::size_t views_per_scene() const {
    return pairing == Pairing::orbit ? azimuth_count() * elevations.size() : frames;
  }

  void validate() const {
    if (num_scenes == 0) throw std::invalid_argument("dataset: need at least one scene");
    if (test_scenes > num_scenes) throw std::invalid_argument("dataset: more test scenes than scenes");
    if (width == 0 || height == 0) throw std::invalid_argument("dataset: empty image size");
    if (pairing == Pairing::orbit) {
      if (!(azimuth_step > 0) || std::fabs(360.0 / azimuth_step - static_cast<double>(azimuth_count())) > 1e-9)
        throw std::invalid_argument("dataset: azimuth step must divide 360");
      if (elevations.empty()) throw std::invalid_argument("dataset: no elevations");
      if (!(radius > 0)) throw std::invalid_argument("dataset: radius must be positive");
    } else if (frames < 2) {
      throw std::invalid_argument("dataset: sequence needs at least two frames");
    }
  }
};

struct ViewPose {
  RigidTransform world_to_cam;
  double azimuth = 0, elevation = 0;  // orbit views only
};

// Circular azimuth distance in degrees.
inline double azimuth_gap(double a, double b) {
  double d = std::fmod(std::fabs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

inline std::vector<ViewPose> view_poses(const DatasetSpec& spec) {
  std::vector<ViewPose> poses;
  if (spec.pairing == Pairing::orbit) {
    for (double el : spec.elevations)
      for (std::size_t a = 0; a < spec.azimuth_count(); ++a) {
        const double az = static_cast<double>(a) * spec.azimuth_step;
        poses.push_back({pose_from_orbit(az, el, spec.radius), az, el});
      }
  } else {
    // Mostly lateral translation with a little forward motion, fixed orientation.
    for (std::size_t k = 0; k < spec.frames; ++k) {
      const double s = static_cast<double>(k);
      const Vec3 eye(-0.8 + 0.08 * s, 0.3, -4.0 + 0.04 * s);
      poses.push_back({look_at(eye, eye + Vec3(0.0, -0.25, 4.0)), 0, 0});
    }
  }
  return poses;
}

struct PairIndex {
  std::size_t source, target;
  bool operator==(const PairIndex&) const = default;
};

// Ordered (source, target) pairs allowed by the pairing rule, source != target.
inline std::vector<PairIndex> enumerate_pairs(const DatasetSpec& spec, const std::vector<ViewPose>& poses) {
  std::vector<PairIndex> pairs;
  for (std::size_t s = 0; s < poses.size(); ++s)
    for (std::size_t t = 0; t < poses.size(); ++t) {
      if (s == t) continue;
      const bool ok = spec.pairing == Pairing::orbit
                          ? azimuth_gap(poses[s].azimuth, poses[t].azimuth) <= spec.max_azimuth_gap + 1e-9
                          : (s > t ? s - t : t - s) <= spec.max_frame_gap;
      if (ok) pairs.push_back({s, t});
    }
  return pairs;
}

// Target pixels whose surface point is seen by the source camera: the
// reprojection lands inside the source image, the bilinearly interpolated
// source depth agrees within `rel_tol`, and all four source taps lie on the
// same face as the target pixel.
inline std::vector<std::uint8_t> visibility_mask(const RenderOutput& src, const RenderOutput& tgt,
                                                 const Intrinsics& K, const RigidTransform& t_to_s,
                                                 double rel_tol = 0.01) {
  const std::size_t W = K.width, H = K.height;
  std::vector<std::uint8_t> vis(W * H, 0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t p = i * W + j;
      if (tgt.face_id[p] < 0) continue;
      const Vec3 Y = t_to_s.apply(K.backproject(Vec2(j + 0.5, i + 0.5), tgt.depth[p]));
      if (Y.z() <= kBehindCameraEps) continue;
      const Vec2 q = K.project(Y);
      const double x = q.x() - 0.5, y = q.y() - 0.5;
      if (x < 0 || y < 0 || x > static_cast<double>(W - 1) || y > static_cast<double>(H - 1)) continue;
      const auto x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
      const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const std::size_t taps[4] = {y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1};
      bool same = true;
      for (auto t : taps) same &= src.face_id[t] == tgt.face_id[p];
      if (!same) continue;
      const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
      const double d = (1 - fy) * ((1 - fx) * src.depth[taps[0]] + fx * src.depth[taps[1]]) +
                       fy * ((1 - fx) * src.depth[taps[2]] + fx * src.depth[taps[3]]);
      if (std::fabs(d - Y.z()) <= rel_tol * Y.z()) vis[p] = 1;
    }
  return vis;
}

namespace detail {

inline std::string scene_dir_name(std::size_t s) {
  std::ostringstream o;
  o << "scene_" << std::setw(4) << std::setfill('0') << s;
  return o.str();
}

inline std::string view_file(const char* prefix, std::size_t v) {
  std::ostringstream o;
  o << prefix << std::setw(3) << std::setfill('0') << v << ".png";
  return o.str();
}

inline std::string vis_file(std::size_t s, std::size_t t) {
  std::ostringstream o;
  o << "vis_" << std::setw(3) << std::setfill('0') << s << "_" << std::setw(3) << std::setfill('0') << t << ".png";
  return o.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("failed writing " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Scene seeds derived from the dataset seed; scene s uses stream index s.
inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace detail

struct GeneratedScene {
  Scene scene;
  std::vector<ViewPose> poses;
  std::vector<RenderOutput> renders;
};

inline GeneratedScene generate_scene(const DatasetSpec& spec, std::size_t index) {
  GeneratedScene g;
  g.scene = random_scene(detail::scene_seed(spec.seed, index));
  g.poses = view_poses(spec);
  const Intrinsics K = default_intrinsics(spec.width, spec.height);
  for (const auto& p : g.poses) g.renders.push_back(render_view(g.scene, p.world_to_cam, K));
  return g;
}

// Renders every scene and writes the dataset under `out_dir`. Deterministic in spec.seed.
inline void generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw DataError("cannot create dataset directory " + out_dir.string());
  const Intrinsics K = default_intrinsics(spec.width, spec.height);

  nlohmann::json manifest;
  manifest["format"] = "nvs-dataset";
  manifest["version"] = kDatasetFormatVersion;
  manifest["pairing"] = pairing_name(spec.pairing);
  manifest["width"] = spec.width;
  manifest["height"] = spec.height;
  manifest["seed"] = spec.seed;
  manifest["scenes"] = nlohmann::json::array();
  manifest["pairs"] = nlohmann::json::array();

  for (std::size_t s = 0; s < spec.num_scenes; ++s) {
    const std::string name = detail::scene_dir_name(s);
    const fs::path dir = out_dir / name;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string());
    const auto g = generate_scene(spec, s);
    const Split split = s + spec.test_scenes >= spec.num_scenes ? Split::test : Split::train;

    nlohmann::json meta;
    meta["intrinsics"] = {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}};
    meta["far_depth"] = g.scene.far_depth;
    meta["views"] = nlohmann::json::array();
    for (std::size_t v = 0; v < g.poses.size(); ++v) {
      const auto& r = g.renders[v];
      write_png(dir / detail::view_file("view_", v), to_raster8(r.image, 3, spec.height, spec.width));
      const double depth_scale = *std::max_element(r.depth.begin(), r.depth.end());
      write_png(dir / detail::view_file("depth_", v), depth_to_raster16(r.depth, spec.height, spec.width, depth_scale));
      const auto vals = g.poses[v].world_to_cam.values();
      meta["views"].push_back({{"id", v},
                               {"image", detail::view_file("view_", v)},
                               {"depth", detail::view_file("depth_", v)},
                               {"depth_scale", depth_scale},
                               {"rotation", std::vector<double>(vals.begin(), vals.begin() + 9)},
                               {"translation", std::vector<double>(vals.begin() + 9, vals.end())},
                               {"azimuth", g.poses[v].azimuth},
                               {"elevation", g.poses[v].elevation}});
    }
    detail::write_text(dir / "meta.json", meta.dump(1) + "\n");

    for (const auto& pr : enumerate_pairs(spec, g.poses)) {
      const auto t_to_s = relative_pose(g.poses[pr.target].world_to_cam, g.poses[pr.source].world_to_cam);
      const auto vis = visibility_mask(g.renders[pr.source], g.renders[pr.target], K, t_to_s);
      RasterImage mask{spec.width, spec.height, 1, 8, {}};
      mask.samples.assign(vis.begin(), vis.end());
      for (auto& m : mask.samples) m = m ? 255 : 0;
      const std::string vis_name = detail::vis_file(pr.source, pr.target);
      write_png(dir / vis_name, mask);
      manifest["pairs"].push_back({{"scene", name},
                                   {"source", pr.source},
                                   {"target", pr.target},
                                   {"split", split_name(split)},
                                   {"visibility", vis_name}});
    }
    manifest["scenes"].push_back({{"name", name}, {"split", split_name(split)}});
  }
  detail::write_text(out_dir / "manifest.json", manifest.dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// Loading

struct ViewRecord {
  std::size_t id = 0;
  RigidTransform world_to_cam;
  std::vector<std::uint8_t> image;            // [3,H,W]
  std::optional<std::vector<double>> depth;   // [H,W]
  double azimuth = 0, elevation = 0;
};

struct SceneRecord {
  std::string name;
  Intrinsics K;
  double far_depth = 0;  // 0 when unknown
  std::map<std::size_t, ViewRecord> views;
};

struct PairRecord {
  std::size_t scene = 0;
  std::size_t source = 0, target = 0;
  Split split = Split::train;
  std::optional<std::filesystem::path> visibility;
};

struct Sample {
  std::string id;
  Tensor source_img, target_img;  // [3,H,W] in [0,1]
  RigidTransform s_to_t;
  Intrinsics K;
  std::optional<Tensor> gt_depth_s, gt_depth_t;  // [1,H,W]
  std::optional<Tensor> gt_visibility;           // [1,H,W], 1 = visible in source
  double far_depth = 0;
};

class SceneDataset {
 public:
  std::filesystem::path root;
  std::size_t width = 0, height = 0;
  Pairing pairing = Pairing::orbit;
  std::vector<SceneRecord> scenes;
  std::vector<PairRecord> pairs;

  std::vector<std::size_t> indices(std::optional<Split> split) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (!split || pairs[i].split == *split) idx.push_back(i);
    return idx;
  }

  Sample sample(std::size_t i) const {
    const PairRecord& pr = pairs.at(i);
    const SceneRecord& sc = scenes.at(pr.scene);
    const ViewRecord& vs = sc.views.at(pr.source);
    const ViewRecord& vt = sc.views.at(pr.target);
    Sample s;
    s.id = sc.name + "/" + std::to_string(pr.source) + "-" + std::to_string(pr.target);
    s.source_img = image_tensor(vs);
    s.target_img = image_tensor(vt);
    s.s_to_t = relative_pose(vs.world_to_cam, vt.world_to_cam);
    s.K = sc.K;
    s.far_depth = sc.far_depth;
    if (vs.depth) s.gt_depth_s = Tensor({1, height, width}, *vs.depth);
    if (vt.depth) s.gt_depth_t = Tensor({1, height, width}, *vt.depth);
    if (pr.visibility) {
      const auto img = read_png(*pr.visibility);
      if (img.width != width || img.height != height || img.channels != 1)
        throw DataError(pr.visibility->string() + ": visibility mask has wrong size");
      std::vector<double> v(img.samples.size());
      std::transform(img.samples.begin(), img.samples.end(), v.begin(), [](auto x) { return x ? 1.0 : 0.0; });
      s.gt_visibility = Tensor({1, height, width}, std::move(v));
    }
    return s;
  }

 private:
  Tensor image_tensor(const ViewRecord& v) const {
    std::vector<double> d(v.image.size());
    std::transform(v.image.begin(), v.image.end(), d.begin(), [](std::uint8_t x) { return x / 255.0; });
    return Tensor({3, height, width}, std::move(d));
  }
};

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline SceneDataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  using detail::field;
  const fs::path mpath = dir / "manifest.json";
  const auto manifest = detail::read_json(mpath);
  const std::string mwhere = mpath.string();
  const int version = field<int>(manifest, "version", mwhere);
  if (version != kDatasetFormatVersion)
    throw DataError(detail::cat(mwhere, ": dataset format version ", version, ", expected ", kDatasetFormatVersion));

  SceneDataset ds;
  ds.root = dir;
  ds.width = field<std::size_t>(manifest, "width", mwhere);
  ds.height = field<std::size_t>(manifest, "height", mwhere);
  try {
    ds.pairing = parse_pairing(field<std::string>(manifest, "pairing", mwhere));
  } catch (const std::invalid_argument& e) {
    throw DataError(mwhere + ": " + e.what());
  }

  // Scenes in sorted name order.
  std::vector<std::string> names;
  for (const auto& s : field<nlohmann::json>(manifest, "scenes", mwhere))
    names.push_back(field<std::string>(s, "name", mwhere + " scenes[]"));
  std::sort(names.begin(), names.end());
  std::map<std::string, std::size_t> scene_index;

  for (const auto& name : names) {
    const fs::path sdir = dir / name;
    const fs::path meta_path = sdir / "meta.json";
    const auto meta = detail::read_json(meta_path);
    const std::string where = meta_path.string();
    SceneRecord sc;
    sc.name = name;
    const auto intr = field<nlohmann::json>(meta, "intrinsics", where);
    sc.K = {field<double>(intr, "fx", where + " intrinsics"), field<double>(intr, "fy", where + " intrinsics"),
            field<double>(intr, "cx", where + " intrinsics"), field<double>(intr, "cy", where + " intrinsics"),
            field<std::size_t>(intr, "width", where + " intrinsics"),
            field<std::size_t>(intr, "height", where + " intrinsics")};
    try {
      sc.K.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(where + ": " + e.what());
    }
    if (sc.K.width != ds.width || sc.K.height != ds.height)
      throw DataError(where + ": intrinsics size disagrees with the manifest");
    sc.far_depth = meta.value("far_depth", 0.0);
    for (const auto& v : field<nlohmann::json>(meta, "views", where)) {
      ViewRecord rec;
      rec.id = field<std::size_t>(v, "id", where + " views[]");
      const std::string vwhere = detail::cat(where, " view ", rec.id);
      if (!v.contains("rotation") || !v.contains("translation"))
        throw DataError(vwhere + ": missing pose entry for image id " + std::to_string(rec.id));
      const auto R = field<std::vector<double>>(v, "rotation", vwhere);
      const auto t = field<std::vector<double>>(v, "translation", vwhere);
      if (R.size() != 9 || t.size() != 3) throw DataError(vwhere + ": pose must have 9 rotation and 3 translation values");
      std::vector<double> vals(R);
      vals.insert(vals.end(), t.begin(), t.end());
      try {
        rec.world_to_cam = RigidTransform::from_values(vals);
      } catch (const std::invalid_argument& e) {
        throw DataError(vwhere + ": " + e.what());
      }
      rec.azimuth = v.value("azimuth", 0.0);
      rec.elevation = v.value("elevation", 0.0);
      const fs::path ipath = sdir / field<std::string>(v, "image", vwhere);
      const auto img = read_png(ipath);
      if (img.width != ds.width || img.height != ds.height || img.channels != 3 || img.bit_depth != 8)
        throw DataError(ipath.string() + ": expected 8-bit RGB " + std::to_string(ds.width) + "x" +
                        std::to_string(ds.height));
      rec.image.assign(img.samples.begin(), img.samples.end());
      if (v.contains("depth")) {
        const fs::path dpath = sdir / field<std::string>(v, "depth", vwhere);
        if (fs::exists(dpath)) {
          const double scale = field<double>(v, "depth_scale", vwhere);
          const auto dimg = read_png(dpath);
          if (dimg.width != ds.width || dimg.height != ds.height)
            throw DataError(dpath.string() + ": depth size disagrees with the manifest");
          try {
            rec.depth = raster16_to_depth(dimg, scale);
          } catch (const DataError& e) {
            throw DataError(dpath.string() + ": " + e.what());
          }
          for (double d : *rec.depth)
            if (!(d > 0)) throw DataError(dpath.string() + ": depth must be positive everywhere");
        }
      }
      if (!sc.views.emplace(rec.id, std::move(rec)).second)
        throw DataError(vwhere + ": duplicate view id");
    }
    scene_index[name] = ds.scenes.size();
    ds.scenes.push_back(std::move(sc));
  }

  for (const auto& p : field<nlohmann::json>(manifest, "pairs", mwhere)) {
    const std::string pwhere = mwhere + " pairs[]";
    PairRecord pr;
    const auto scene = field<std::string>(p, "scene", pwhere);
    auto it = scene_index.find(scene);
    if (it == scene_index.end()) throw DataError(pwhere + ": unknown scene " + scene);
    pr.scene = it->second;
    pr.source = field<std::size_t>(p, "source", pwhere);
    pr.target = field<std::size_t>(p, "target", pwhere);
    const auto& views = ds.scenes[pr.scene].views;
    for (auto id : {pr.source, pr.target})
      if (!views.count(id)) throw DataError(detail::cat(pwhere, ": ", scene, " has no pose entry for image id ", id));
    pr.split = p.value("split", std::string("train")) == "test" ? Split::test : Split::train;
    if (p.contains("visibility")) {
      const fs::path vpath = dir / scene / field<std::string>(p, "visibility", pwhere);
      if (fs::exists(vpath)) pr.visibility = vpath;
    }
    ds.pairs.push_back(pr);
  }
  std::stable_sort(ds.pairs.begin(), ds.pairs.end(), [](const PairRecord& a, const PairRecord& b) {
    return std::tie(a.scene, a.source, a.target) < std::tie(b.scene, b.source, b.target);
  });
  return ds;
}

// Stacks per-sample [C,H,W] tensors into [B,C,H,W].
inline Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  Shape shape = items.front().shape();
  std::vector<double> data;
  data.reserve(items.size() * items.front().numel());
  for (const auto& t : items) {
    if (t.shape() != shape) throw ShapeError("stack: shape mismatch");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace nvs
