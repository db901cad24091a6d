#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage, 2 data, 3 numerical.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "nvs/dataset.hpp"
#include "nvs/gradcheck.hpp"
#include "nvs/image_io.hpp"
#include "nvs/metrics.hpp"
#include "nvs/trainer.hpp"
#include "nvs/warp.hpp"

namespace nvs::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Relative pose given either as orbit deltas or as 12 explicit values.
struct PoseOptions {
  std::vector<double> values;  // R row-major, then t (source camera -> target camera)
  double azimuth = 0, elevation = 0;
  double source_elevation = 0;
  double radius = 4.0;

  void add_to(CLI::App& app) {
    app.add_option("--pose", values, "Explicit source-to-target [R|t], 12 values (R row-major, then t)")
        ->expected(12);
    app.add_option("--azimuth", azimuth, "Azimuth change in degrees on the orbit");
    app.add_option("--elevation", elevation, "Elevation change in degrees on the orbit");
    app.add_option("--source-elevation", source_elevation, "Elevation of the source camera on the orbit");
    app.add_option("--radius", radius, "Orbit radius");
  }

  RigidTransform resolve(const CLI::App& app) const {
    const bool orbit = app.count("--azimuth") || app.count("--elevation");
    if (!values.empty() && orbit) throw CLI::ValidationError("--pose cannot be combined with --azimuth/--elevation");
    if (!values.empty()) return RigidTransform::from_values(values);
    if (!orbit) return RigidTransform::identity();
    return relative_pose(pose_from_orbit(0, source_elevation, radius),
                         pose_from_orbit(azimuth, source_elevation + elevation, radius));
  }
};

inline nlohmann::json pose_json(const RigidTransform& T) {
  const auto v = T.values();
  return std::vector<double>(v.begin(), v.end());
}

inline Tensor load_rgb(const std::filesystem::path& path) {
  const RasterImage img = read_png(path);
  if (img.channels != 3) throw DataError(path.string() + ": expected an RGB image");
  return Tensor({1, 3, img.height, img.width}, raster_to_unit(img));
}

inline Intrinsics resolve_intrinsics(const std::vector<double>& v, std::size_t w, std::size_t h) {
  if (v.empty()) return default_intrinsics(w, h);
  Intrinsics K{v[0], v[1], v[2], v[3], w, h};
  K.validate();
  return K;
}

// "x y z r g b" per pixel, camera frame of the target view, colours 0-255.
inline void write_point_cloud(const std::filesystem::path& path, std::span<const double> depth,
                              std::span<const double> rgb, const Intrinsics& K) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  const std::size_t W = K.width, H = K.height, hw = W * H;
  char buf[160];
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t p = i * W + j;
      const Vec3 X = K.backproject(Vec2(j + 0.5, i + 0.5), depth[p]);
      std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g %d %d %d\n", X.x(), X.y(), X.z(), quantize8(rgb[p]),
                    quantize8(rgb[hw + p]), quantize8(rgb[2 * hw + p]));
      os << buf;
    }
  if (!os) throw DataError("failed writing " + path.string());
}

inline void print_resolved(std::ostream& out, const std::string& command, const nlohmann::json& j) {
  out << "resolved " << command << " config: " << j.dump() << "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Depth-guided novel view synthesis toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "nvs 1.0");

  // gen-data
  DatasetSpec spec;
  std::string gen_out, pairing = "orbit";
  std::size_t size = 64;
  auto* gen = app.add_subcommand("gen-data", "Render a procedural dataset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", spec.num_scenes, "Number of scenes")->capture_default_str();
  gen->add_option("--test-scenes", spec.test_scenes, "Trailing scenes marked as held out")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Random seed")->capture_default_str();
  gen->add_option("--size", size, "Image width and height")->capture_default_str();
  gen->add_option("--pairing", pairing, "orbit or sequence")
      ->check(CLI::IsMember({"orbit", "sequence"}))
      ->capture_default_str();

  // train
  std::string train_config, train_dataset, train_out, resume;
  std::optional<std::size_t> steps, batch, max_pairs;
  std::optional<std::uint64_t> train_seed;
  std::optional<double> lr;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", train_config, "Training config file (JSON)");
  tr->add_option("--dataset", train_dataset, "Dataset directory (overrides the config)");
  tr->add_option("--out", train_out, "Run directory for checkpoint and loss log (overrides the config)");
  tr->add_option("--steps", steps, "Total optimisation steps");
  tr->add_option("--batch-size", batch, "Pairs per step");
  tr->add_option("--lr", lr, "Adam learning rate");
  tr->add_option("--seed", train_seed, "Seed for both parameter init and pair sampling");
  tr->add_option("--max-pairs", max_pairs, "Train on the first N training pairs only");
  tr->add_option("--resume", resume, "Checkpoint to resume from");

  // synth
  std::string ck_path, source_path, synth_out, depth_out, points_out;
  std::vector<double> intr;
  PoseOptions synth_pose;
  auto* sy = app.add_subcommand("synth", "Synthesize a novel view from one source image");
  sy->add_option("--checkpoint", ck_path, "Trained checkpoint")->required();
  sy->add_option("--source", source_path, "Source image (PNG)")->required();
  sy->add_option("--out", synth_out, "Output image (PNG)")->required();
  sy->add_option("--depth-out", depth_out, "Predicted target depth (16-bit PNG, scale = depth_max)");
  sy->add_option("--points-out", points_out, "Point cloud text file");
  sy->add_option("--intrinsics", intr, "fx fy cx cy (default: generator camera)")->expected(4);
  synth_pose.add_to(*sy);

  // warp
  std::string warp_source, warp_depth, warp_out, warp_mask;
  double depth_scale = 0;
  std::vector<double> warp_intr;
  PoseOptions warp_pose;
  auto* wp = app.add_subcommand("warp", "Warp a source image into the target view using target depth");
  wp->add_option("--source", warp_source, "Source image (PNG)")->required();
  wp->add_option("--depth", warp_depth, "Target-view depth (16-bit PNG)")->required();
  wp->add_option("--depth-scale", depth_scale, "Depth value of PNG sample 65535")->required();
  wp->add_option("--out", warp_out, "Warped image (PNG)")->required();
  wp->add_option("--mask-out", warp_mask, "Validity mask (PNG)");
  wp->add_option("--intrinsics", warp_intr, "fx fy cx cy (default: generator camera)")->expected(4);
  warp_pose.add_to(*wp);

  // eval
  std::string ev_ckpt, ev_dataset, ev_out, ev_split = "test";
  std::size_t ev_max = 0;
  bool all_pixels = false;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", ev_ckpt, "Trained checkpoint")->required();
  ev->add_option("--dataset", ev_dataset, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Metrics CSV")->required();
  ev->add_option("--split", ev_split, "test, train or all")
      ->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();
  ev->add_option("--max-samples", ev_max, "Evaluate at most N pairs (0 = all)");
  ev->add_flag("--all-pixels", all_pixels, "Depth metrics over every pixel instead of the foreground");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  bool skip_model = false;
  gc->add_flag("--primitives-only", skip_model, "Skip the end-to-end model check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    if (*gen) {
      spec.width = spec.height = size;
      spec.pairing = parse_pairing(pairing);
      spec.validate();
      print_resolved(out, "gen-data",
                     {{"out", gen_out}, {"scenes", spec.num_scenes}, {"test_scenes", spec.test_scenes},
                      {"seed", spec.seed}, {"size", size}, {"pairing", pairing},
                      {"views_per_scene", spec.views_per_scene()}});
      generate_dataset(spec, gen_out);
      out << "wrote " << spec.num_scenes << " scenes to " << gen_out << "\n";
    } else if (*tr) {
      TrainConfig cfg;
      if (!train_config.empty()) {
        std::ifstream is(train_config);
        if (!is) throw DataError("cannot open " + train_config);
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
          throw DataError(train_config + ": " + e.what());
        }
        cfg = j.get<TrainConfig>();
      }
      if (!train_dataset.empty()) cfg.dataset = train_dataset;
      if (!train_out.empty()) cfg.out_dir = train_out;
      if (steps) cfg.steps = *steps;
      if (batch) cfg.batch_size = *batch;
      if (lr) cfg.lr = *lr;
      if (max_pairs) cfg.max_pairs = *max_pairs;
      if (train_seed) cfg.seed = cfg.model.seed = *train_seed;
      if (cfg.dataset.empty()) throw CLI::ValidationError("train: no dataset given (--dataset or config)");
      cfg.validate();
      print_resolved(out, "train", cfg);
      TrainOptions opt;
      opt.log = &out;
      if (!resume.empty()) opt.resume = resume;
      const auto r = train(cfg, opt);
      if (!r.losses.empty()) out << "final total loss " << r.losses.back().total << "\n";
      out << "checkpoint " << r.checkpoint.string() << "\n";
    } else if (*sy) {
      const RigidTransform T = synth_pose.resolve(*sy);
      const Checkpoint ck = load_checkpoint(ck_path);
      const Model model = model_from_checkpoint(ck);
      const ModelConfig& mc = model.config();
      const Tensor src = load_rgb(source_path);
      if (src.dim(2) != mc.height || src.dim(3) != mc.width)
        throw DataError(detail::cat(source_path, ": image is ", src.dim(3), "x", src.dim(2), ", model expects ",
                                    mc.width, "x", mc.height));
      const Intrinsics K = resolve_intrinsics(intr, mc.width, mc.height);
      print_resolved(out, "synth",
                     {{"checkpoint", ck_path}, {"source", source_path}, {"out", synth_out}, {"depth_out", depth_out},
                      {"points_out", points_out}, {"pose", pose_json(T)},
                      {"intrinsics", {K.fx, K.fy, K.cx, K.cy}}});
      NoGradGuard ng;
      const ForwardResult r = model.forward(src, T, K);
      const Tensor& img = r.predictions.back();
      write_png(synth_out, to_raster8(img.data(), 3, mc.height, mc.width));
      const Tensor depth = resize_bilinear(r.depth, mc.height, mc.width, false);
      if (!depth_out.empty())
        write_png(depth_out, depth_to_raster16(depth.data(), mc.height, mc.width, mc.depth_max));
      if (!points_out.empty()) write_point_cloud(points_out, depth.data(), img.data(), K);
      out << "wrote " << synth_out << "\n";
    } else if (*wp) {
      const RigidTransform s_to_t = warp_pose.resolve(*wp);
      if (!(depth_scale > 0)) throw CLI::ValidationError("--depth-scale must be positive");
      const Tensor src = load_rgb(warp_source);
      const std::size_t H = src.dim(2), W = src.dim(3);
      const RasterImage draw = read_png(warp_depth);
      if (draw.width != W || draw.height != H)
        throw DataError(warp_depth + ": depth size differs from the source image");
      std::vector<double> d;
      try {
        d = raster16_to_depth(draw, depth_scale);
      } catch (const DataError& e) {
        throw DataError(warp_depth + ": " + e.what());
      }
      for (double v : d)
        if (!(v > 0)) throw DataError(warp_depth + ": depth must be positive everywhere");
      const Intrinsics K = resolve_intrinsics(warp_intr, W, H);
      print_resolved(out, "warp",
                     {{"source", warp_source}, {"depth", warp_depth}, {"depth_scale", depth_scale}, {"out", warp_out},
                      {"pose", pose_json(s_to_t)}, {"intrinsics", {K.fx, K.fy, K.cx, K.cy}}});
      NoGradGuard ng;
      const auto w = warp_image(src, Tensor({1, 1, H, W}, std::move(d)), K, invert(s_to_t));
      write_png(warp_out, to_raster8(w.features.data(), 3, H, W));
      if (!warp_mask.empty()) write_png(warp_mask, to_raster8(w.valid.data(), 1, H, W));
      out << "wrote " << warp_out << "\n";
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const Model model = model_from_checkpoint(ck);
      const SceneDataset ds = load_dataset(ev_dataset);
      std::optional<Split> split;
      if (ev_split != "all") split = ev_split == "test" ? Split::test : Split::train;
      auto idx = ds.indices(split);
      if (idx.empty()) throw DataError(ev_dataset + ": no pairs in split " + ev_split);
      if (ev_max && idx.size() > ev_max) idx.resize(ev_max);
      print_resolved(out, "eval",
                     {{"checkpoint", ev_ckpt}, {"dataset", ev_dataset}, {"out", ev_out}, {"split", ev_split},
                      {"samples", idx.size()}, {"foreground_only", !all_pixels}});
      EvalOptions eo;
      eo.foreground_only = !all_pixels;
      const auto rows = evaluate(model, ds, idx, eo);
      const std::string csv = metrics_csv(rows);
      detail::write_text(ev_out, csv);
      const auto m = mean_report(rows);
      out << "mean l1 " << m.l1 << " ssim " << m.ssim << "\n";
    } else if (*gc) {
      print_resolved(out, "grad-check",
                     {{"primitive_step", 1e-4}, {"primitive_tolerance", 1e-4}, {"model_step", 1e-5},
                      {"model_tolerance", 1e-3}, {"model", !skip_model}});
      auto results = primitive_grad_checks();
      if (!skip_model) results.push_back(model_grad_check());
      bool ok = true;
      for (const auto& r : results) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-4s %-36s max rel err %.3e (%zu values, tol %.0e)\n", r.passed() ? "ok" : "FAIL",
                      r.name.c_str(), r.max_error, r.checked, r.tolerance);
        out << buf;
        ok &= r.passed();
      }
      if (!ok) {
        err << "grad-check: some gradients disagree with finite differences\n";
        return kNumerical;
      }
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

}  // namespace nvs::cli
