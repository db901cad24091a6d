// Acceptance suite: one PASS/FAIL (or INFO) line per criterion, nonzero exit
// when any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "nvs/nvs.hpp"
#include "support/reference_ssim.hpp"

using namespace nvs;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  enum Kind { pass, fail, info } kind;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// Relative path -> contents for every regular file under `dir`.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------

Outcome published_numbers() {
  return {Outcome::info,
          "published benchmark numbers need the original datasets and GPU-scale training; "
          "reproduced here directionally and by property (criteria 2-8)"};
}

Outcome gradient_suite() {
  const Stopwatch sw;
  auto results = primitive_grad_checks();
  const auto model = model_grad_check();
  double worst_prim = 0;
  bool ok = model.passed() && model.tolerance <= 1e-3;
  std::string failed;
  for (const auto& r : results) {
    worst_prim = std::max(worst_prim, r.max_error);
    if (!r.passed() || r.tolerance > 1e-4) {
      ok = false;
      failed += " " + r.name;
    }
  }
  if (!model.passed()) failed += " " + model.name;
  const double t = sw.seconds();
  ok &= t < 120;
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("%zu primitive checks worst rel err %.2e (< 1e-4); tiny model %zu values rel err %.2e (< 1e-3); "
              "%.1f s (< 120 s)%s%s",
              results.size(), worst_prim, model.checked, model.max_error, t, failed.empty() ? "" : "; failed:",
              failed.c_str())};
}

Outcome geometric_oracle() {
  const Stopwatch sw;
  DatasetSpec spec;
  spec.num_scenes = 10;
  const std::size_t H = spec.height, W = spec.width, hw = H * W;
  const Intrinsics K = default_intrinsics(W, H);
  double worst = 0;
  std::size_t pairs = 0, over = 0;
  bool identity_exact = true;
  for (std::size_t s = 0; s < spec.num_scenes; ++s) {
    const GeneratedScene g = generate_scene(spec, s);
    for (const auto& r : g.renders) {
      const Tensor img({1, 3, H, W}, r.image);
      const auto w = warp_image(img, Tensor({1, 1, H, W}, r.depth), K, RigidTransform::identity());
      for (std::size_t k = 0; k < img.numel(); ++k) identity_exact &= w.features[k] == img[k];
    }
    for (const auto& pr : enumerate_pairs(spec, g.poses)) {
      const auto& src = g.renders[pr.source];
      const auto& tgt = g.renders[pr.target];
      const RigidTransform t_to_s = relative_pose(g.poses[pr.target].world_to_cam, g.poses[pr.source].world_to_cam);
      const auto vis = visibility_mask(src, tgt, K, t_to_s);
      const auto w = warp_image(Tensor({1, 3, H, W}, src.image), Tensor({1, 1, H, W}, tgt.depth), K, t_to_s);
      double err = 0;
      std::size_t n = 0;
      for (std::size_t p = 0; p < hw; ++p)
        if (vis[p])
          for (std::size_t c = 0; c < 3; ++c, ++n) err += std::fabs(w.features[c * hw + p] - tgt.image[c * hw + p]);
      ++pairs;
      if (!n) continue;
      err /= static_cast<double>(n);
      worst = std::max(worst, err);
      over += err >= 2.0 / 255.0;
    }
  }
  const double t = sw.seconds();
  const bool ok = over == 0 && identity_exact && t < 60;
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("%zu pairs over 10 scenes at %zux%zu, worst masked L1 %.5f (< %.5f), %zu over; identity warp %s; "
              "%.1f s (< 60 s)",
              pairs, W, H, worst, 2.0 / 255.0, over, identity_exact ? "exact" : "NOT exact", t)};
}

Outcome overfit() {
  const Stopwatch sw;
  const ModelConfig cfg;
  Model model(cfg);
  DatasetSpec spec;
  spec.width = cfg.width;
  spec.height = cfg.height;
  const GeneratedScene g = generate_scene(spec, 0);
  const auto pr = enumerate_pairs(spec, g.poses).front();
  Batch batch;
  batch.source = Tensor({1, 3, cfg.height, cfg.width}, g.renders[pr.source].image);
  batch.target = Tensor({1, 3, cfg.height, cfg.width}, g.renders[pr.target].image);
  batch.s_to_t = {relative_pose(g.poses[pr.source].world_to_cam, g.poses[pr.target].world_to_cam)};
  batch.K = default_intrinsics(cfg.width, cfg.height);

  const LossWeights w;
  const auto extractor = PerceptualExtractor::random();
  AdamState adam = make_adam(model.params(), 1e-3);
  const std::size_t steps = 500;
  for (std::size_t i = 0; i < steps; ++i) {
    model.params().zero_grad();
    backward(total_loss(compute_losses(model, batch, w, extractor), w));
    adam_step(model.params(), adam);
  }
  NoGradGuard ng;
  const auto r = model.forward(batch.source, batch.s_to_t, batch.K);
  const double l1 = l1_error(r.predictions.back().data(), batch.target.data());
  const double t = sw.seconds();
  const bool ok = l1 < 0.02 && t < 600;
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("default %zux%zu model, one pair, %zu steps at lr 1e-3: finest L1 %.4f (< 0.02); %.0f s (< 600 s)",
              cfg.width, cfg.height, steps, l1, t)};
}

// Held-out SSIM of full / no-skip / no-depth-consistency variants over seeds.
Outcome ablation(const fs::path& work, std::size_t steps, const std::vector<std::uint64_t>& seeds) {
  const Stopwatch sw;
  const fs::path data = work / "ablation_data";
  DatasetSpec spec;
  spec.num_scenes = 20;
  spec.test_scenes = 4;
  spec.width = spec.height = 32;
  fs::remove_all(data);
  generate_dataset(spec, data);
  const SceneDataset ds = load_dataset(data);
  const auto test_idx = ds.indices(Split::test);

  auto make = [&](std::uint64_t seed, const std::string& variant) {
    TrainConfig c;
    c.dataset = data.string();
    c.out_dir = (work / "ablation_runs" / (variant + "_" + std::to_string(seed))).string();
    c.steps = steps;
    c.batch_size = 4;
    c.lr = 1e-3;
    c.seed = seed;
    c.checkpoint_every = 0;
    c.model.height = c.model.width = 32;
    c.model.channels = {8, 16, 32, 48, 64};
    c.model.latent_points = 64;
    c.model.seed = seed;
    if (variant == "noskip") c.model.skip_levels.clear();
    if (variant == "nodepth") c.loss.depth = 0;
    return c;
  };

  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : seeds) {
    std::map<std::string, double> ssim;
    for (const std::string v : {"full", "noskip", "nodepth"}) {
      const TrainConfig c = make(seed, v);
      const auto run = train(c);
      const Model m = model_from_checkpoint(load_checkpoint(run.checkpoint));
      ssim[v] = mean_report(evaluate(m, ds, test_idx)).ssim;
      std::cerr << "  ablation seed " << seed << " " << v << " held-out SSIM " << ssim[v] << "\n";
    }
    const double m_skip = ssim["full"] - ssim["noskip"], m_depth = ssim["full"] - ssim["nodepth"];
    ok &= m_skip > 0 && m_depth > 0;
    detail += fmt("seed %llu: full %.4f noskip %.4f nodepth %.4f (margins %+.4f %+.4f); ",
                  static_cast<unsigned long long>(seed), ssim["full"], ssim["noskip"], ssim["nodepth"], m_skip,
                  m_depth);
  }
  const double t = sw.seconds();
  ok &= t < 7200;
  detail += fmt("%zu steps per run, %.0f s (< 7200 s)", steps, t);
  return {ok ? Outcome::pass : Outcome::fail, detail};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0, 1);
  double worst_ssim = 0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t H = 11 + k % 23, W = 11 + (k * 5) % 19;
    std::vector<double> a(3 * H * W), b(3 * H * W);
    for (auto& x : a) x = u(rng);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = k % 2 ? 0.6 * a[i] + 0.4 * u(rng) : u(rng);
    worst_ssim = std::max(worst_ssim, std::fabs(ssim(a, b, 3, H, W) - oracle::reference_ssim(a, b, 3, H, W)));
  }

  // Uniform cases: gt = 2 with pred = 1 everywhere, and pred = gt.
  const std::vector<double> one(64, 1.0), two(64, 2.0);
  const DepthMetrics m = depth_metrics(one, two), z = depth_metrics(one, one);
  const double uniform_err =
      std::max({std::fabs(m.l1_all - 1.0), std::fabs(m.l1_rel - 0.5), std::fabs(m.l1_inv - 0.5), std::fabs(m.sc_inv),
                std::fabs(z.l1_all), std::fabs(z.l1_rel), std::fabs(z.l1_inv), std::fabs(z.sc_inv)});

  std::uniform_real_distribution<double> d(1, 9);
  std::vector<double> gt(500), pred(500);
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = d(rng), pred[i] = d(rng);
  const double base = depth_metrics(pred, gt).sc_inv;
  double worst_scale = 0;
  for (double s : {0.25, 3.0, 11.0}) {
    std::vector<double> scaled(pred);
    for (auto& x : scaled) x *= s;
    worst_scale = std::max(worst_scale, std::fabs(depth_metrics(scaled, gt).sc_inv - base));
  }
  const bool ok = worst_ssim <= 1e-6 && uniform_err <= 1e-12 && worst_scale <= 1e-9;
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("SSIM vs reference max |diff| %.1e on 100 pairs (<= 1e-6); uniform depth cases max err %.1e "
              "(<= 1e-12); sc-inv under scaling max drift %.1e (<= 1e-9)",
              worst_ssim, uniform_err, worst_scale)};
}

int run_tool(const fs::path& nvs, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + nvs.string() + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism(const fs::path& work, const fs::path& nvs) {
  if (nvs.empty() || !fs::exists(nvs)) return {Outcome::fail, "nvs executable not found (pass --nvs)"};
  const fs::path root = fresh_dir(work / "determinism");
  TrainConfig c;
  c.steps = 50;
  c.batch_size = 2;
  c.lr = 1e-3;
  c.seed = 5;
  c.checkpoint_every = 0;
  c.model.height = c.model.width = 32;
  c.model.channels = {4, 8, 8, 16, 16};
  c.model.latent_points = 16;
  c.model.seed = 5;
  std::ofstream(root / "train.json") << nlohmann::json(c).dump(2);

  std::vector<std::string> mismatched;
  int failures = 0;
  // Both runs use the same paths (the checkpoint records them), then move aside.
  const fs::path r = root / "work";
  for (const char* run : {"a", "b"}) {
    fs::remove_all(r);
    failures += run_tool(nvs, "gen-data --scenes 2 --test-scenes 1 --seed 7 --size 32 --out \"" +
                                  (r / "data").string() + "\"",
                         root / (std::string(run) + "_gen.log")) != 0;
    failures += run_tool(nvs, "train --config \"" + (root / "train.json").string() + "\" --dataset \"" +
                                  (r / "data").string() + "\" --out \"" + (r / "run").string() + "\"",
                         root / (std::string(run) + "_train.log")) != 0;
    failures += run_tool(nvs, "eval --checkpoint \"" + (r / "run" / "checkpoint.bin").string() + "\" --dataset \"" +
                                  (r / "data").string() + "\" --out \"" + (r / "metrics.csv").string() + "\"",
                         root / (std::string(run) + "_eval.log")) != 0;
    if (fs::exists(r)) fs::rename(r, root / run);
  }
  if (failures) return {Outcome::fail, fmt("%d tool invocations failed; see %s", failures, root.c_str())};

  std::size_t files = 0;
  auto compare = [&](const std::string& label, const std::map<std::string, std::string>& a,
                     const std::map<std::string, std::string>& b) {
    files += a.size();
    if (a != b) mismatched.push_back(label);
  };
  compare("gen-data", tree(root / "a" / "data"), tree(root / "b" / "data"));
  compare("train", tree(root / "a" / "run"), tree(root / "b" / "run"));
  compare("eval", {{"metrics.csv", slurp(root / "a" / "metrics.csv")}},
          {{"metrics.csv", slurp(root / "b" / "metrics.csv")}});
  std::string which;
  for (const auto& m : mismatched) which += " " + m;
  return {mismatched.empty() ? Outcome::pass : Outcome::fail,
          fmt("gen-data, train (50 steps) and eval run twice as separate processes: %zu files %s%s", files,
              mismatched.empty() ? "bit-identical" : "differ in", which.c_str())};
}

Outcome loss_fixed_points() {
  std::mt19937_64 rng(8);
  const Tensor img = Tensor::uniform({2, 3, 16, 16}, 0, 1, rng);
  // Every scale predicts the target exactly.
  const double reco = multiscale_reconstruction({img, img, img}, img, {1.0, 0.5, 0.25}).item();
  const double vgg = perceptual_loss(img, img, PerceptualExtractor::random()).item();

  const Model m(tiny_model_config());
  const Tensor z = Tensor::uniform({2, m.config().latent_points, 3}, -1, 1, rng);
  const double depth = depth_consistency(z, z, [&](const Tensor& x) { return m.decode_depth(x); }).item();
  const double edge = edge_aware_smoothness(Tensor::full({2, 1, 16, 16}, 3.7), img).item();
  const bool ok = reco == 0 && vgg == 0 && depth == 0 && edge == 0;
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("reconstruction %g, perceptual %g (equal images); depth consistency %g (equal latents); "
              "edge smoothness %g (constant depth); all must be exactly 0",
              reco, vgg, depth, edge)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> criteria{1, 2, 3, 4, 6, 7, 8};
  std::string work = (fs::temp_directory_path() / "nvs_acceptance").string(), nvs_path;
  std::size_t ablation_steps = 5000;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  app.add_option("--criteria", criteria, "Criteria to run (5, the ablation, is slow and off by default)")
      ->delimiter(',');
  app.add_option("--work-dir", work, "Scratch directory")->capture_default_str();
  app.add_option("--nvs", nvs_path, "Path to the nvs executable (determinism criterion)");
  app.add_option("--ablation-steps", ablation_steps, "Training steps per ablation run")->capture_default_str();
  app.add_option("--seeds", seeds, "Ablation seeds")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> suite{
      {1, {"published benchmark numbers", published_numbers}},
      {2, {"gradient suite", gradient_suite}},
      {3, {"geometric oracle", geometric_oracle}},
      {4, {"overfit", overfit}},
      {5, {"ablation ordering", [&] { return ablation(work, ablation_steps, seeds); }}},
      {6, {"metric oracles", metric_oracles}},
      {7, {"determinism", [&] { return determinism(work, nvs_path); }}},
      {8, {"loss fixed points", loss_fixed_points}},
  };

  int failed = 0;
  for (int id : std::set<int>(criteria.begin(), criteria.end())) {
    const auto it = suite.find(id);
    if (it == suite.end()) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("threw: ") + e.what()};
    }
    const char* tag = o.kind == Outcome::pass ? "PASS" : o.kind == Outcome::fail ? "FAIL" : "INFO";
    failed += o.kind == Outcome::fail;
    std::cout << tag << " [" << id << "] " << it->second.first << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
