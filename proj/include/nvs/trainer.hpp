#pragma once

// Joint training of encoder and both decoders with Adam, checkpointing with
// resumable random-stream state, and dataset evaluation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "nvs/dataset.hpp"
#include "nvs/losses.hpp"
#include "nvs/metrics.hpp"
#include "nvs/model.hpp"
#include "nvs/serialize.hpp"

namespace nvs {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;  // per parameter, in ParamSet order
};

inline AdamState make_adam(const ParamSet& params, double lr = 1e-4) {
  AdamState s;
  s.lr = lr;
  for (const auto& p : params.items()) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

// Bias-corrected Adam update. Every gradient is checked before any parameter
// changes, so a non-finite gradient leaves the state untouched.
inline void adam_step(ParamSet& params, AdamState& s) {
  const auto items = params.items();
  if (s.m.size() != items.size() || s.v.size() != items.size())
    throw std::logic_error("adam_step: optimizer state does not match the parameter set");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Tensor& p = items[i].tensor;
    if (s.m[i].size() != p.numel() || s.v[i].size() != p.numel())
      throw ShapeError("adam_step: moment shape mismatch for " + items[i].name);
    if (p.has_grad() && !all_finite(p.grad()))
      throw NumericalError("adam_step: non-finite gradient in parameter " + items[i].name);
  }
  ++s.t;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor p = items[i].tensor;
    const bool has = p.has_grad();
    const auto g = p.grad();
    auto x = p.leaf_data();
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double gk = has ? g[k] : 0.0;
      m[k] = s.beta1 * m[k] + (1 - s.beta1) * gk;
      v[k] = s.beta2 * v[k] + (1 - s.beta2) * gk * gk;
      x[k] -= s.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + s.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration

inline constexpr int kConfigVersion = 1;

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_size = 4;
  // Seeds the pair-sampling stream; parameter init uses model.seed.
  std::uint64_t seed = 0;
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::string dataset;
  std::string out_dir = "run";
  std::size_t checkpoint_every = 500;
  std::size_t log_every = 50;
  // Use only the first `max_pairs` training pairs (0 = all).
  std::size_t max_pairs = 0;
  // Optional tensor file with perceptual extractor weights; empty = seeded random extractor.
  std::string perceptual_weights;
  std::uint64_t perceptual_seed = 7;
  LossWeights loss;
  ModelConfig model;

  void validate() const {
    if (steps < 1) throw std::invalid_argument("train config: steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("train config: lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw std::invalid_argument("train config: Adam betas must lie in [0,1)");
    if (!(eps > 0)) throw std::invalid_argument("train config: eps must be positive");
    loss.validate();
    model.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"version", kConfigVersion},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"dataset", c.dataset},
       {"out_dir", c.out_dir},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"max_pairs", c.max_pairs},
       {"perceptual_weights", c.perceptual_weights},
       {"perceptual_seed", c.perceptual_seed},
       {"loss", c.loss},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{"version", "steps", "batch_size", "seed", "lr", "beta1", "beta2", "eps",
                                           "dataset", "out_dir", "checkpoint_every", "log_every", "max_pairs",
                                           "perceptual_weights", "perceptual_seed", "loss", "model"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument("train config: unknown key '" + it.key() + "'");
  const int version = j.value("version", kConfigVersion);
  if (version != kConfigVersion)
    throw std::invalid_argument(detail::cat("train config: version ", version, ", this build reads version ",
                                            kConfigVersion));
  TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.dataset = j.value("dataset", d.dataset);
  c.out_dir = j.value("out_dir", d.out_dir);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.log_every = j.value("log_every", d.log_every);
  c.max_pairs = j.value("max_pairs", d.max_pairs);
  c.perceptual_weights = j.value("perceptual_weights", d.perceptual_weights);
  c.perceptual_seed = j.value("perceptual_seed", d.perceptual_seed);
  c.loss = j.contains("loss") ? j.at("loss").get<LossWeights>() : d.loss;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
}

inline PerceptualExtractor make_extractor(const TrainConfig& c) {
  return c.perceptual_weights.empty() ? PerceptualExtractor::random(c.perceptual_seed)
                                      : PerceptualExtractor::load(c.perceptual_weights);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  std::uint64_t step = 0;
  std::string rng_state;
  AdamState adam;
  std::vector<StoredTensor> params;
};

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw DataError("checkpoint: corrupt random-stream state");
  return rng;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const AdamState& adam,
                            const TrainConfig& config, std::uint64_t step, const std::mt19937_64& rng) {
  nlohmann::json h;
  h["format"] = "nvs-checkpoint";
  h["version"] = kCheckpointVersion;
  h["step"] = step;
  h["rng"] = rng_to_string(rng);
  h["adam"] = {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}, {"t", adam.t}};
  h["config"] = config;
  TensorFile f;
  f.header = h.dump();
  const auto items = params.items();
  for (const auto& p : items)
    f.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  for (std::size_t i = 0; i < items.size(); ++i) {
    f.tensors.push_back({"adam.m." + items[i].name, items[i].tensor.shape(), adam.m.at(i)});
    f.tensors.push_back({"adam.v." + items[i].name, items[i].tensor.shape(), adam.v.at(i)});
  }
  save_tensor_file(path, f);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorFile f = load_tensor_file(path);
  const std::string where = path.string();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(f.header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": checkpoint header is not valid JSON: " + e.what());
  }
  if (h.value("format", std::string()) != "nvs-checkpoint") throw DataError(where + ": not a checkpoint file");
  const int version = h.value("version", -1);
  if (version != kCheckpointVersion)
    throw DataError(detail::cat(where, ": checkpoint version ", version, " but this build reads version ",
                                kCheckpointVersion));
  Checkpoint c;
  try {
    c.config = h.at("config").get<TrainConfig>();
    c.step = h.at("step").get<std::uint64_t>();
    c.rng_state = h.at("rng").get<std::string>();
    const auto& a = h.at("adam");
    c.adam.lr = a.at("lr");
    c.adam.beta1 = a.at("beta1");
    c.adam.beta2 = a.at("beta2");
    c.adam.eps = a.at("eps");
    c.adam.t = a.at("t");
  } catch (const std::exception& e) {
    throw DataError(where + ": bad checkpoint header: " + e.what());
  }
  for (const auto& t : f.tensors)
    if (t.name.rfind("adam.", 0) != 0) c.params.push_back(t);
  for (const auto& p : c.params) {
    const StoredTensor* m = f.find("adam.m." + p.name);
    const StoredTensor* v = f.find("adam.v." + p.name);
    if (!m || !v) throw DataError(where + ": missing optimizer moments for " + p.name);
    if (m->data.size() != p.data.size() || v->data.size() != p.data.size())
      throw DataError(where + ": optimizer moments for " + p.name + " have the wrong size");
    c.adam.m.push_back(m->data);
    c.adam.v.push_back(v->data);
  }
  return c;
}

// Copies stored values into the model parameters. Every name and shape
// disagreement is collected and reported together.
inline void restore_params(ParamSet& params, const std::vector<StoredTensor>& stored) {
  std::vector<std::string> problems;
  std::set<std::string> seen;
  for (const auto& s : stored) {
    seen.insert(s.name);
    if (!params.contains(s.name)) {
      problems.push_back(s.name + ": not a parameter of this model");
      continue;
    }
    const Tensor& p = params.at(s.name);
    if (p.shape() != s.shape)
      problems.push_back(s.name + ": checkpoint " + to_string(s.shape) + " vs model " + to_string(p.shape()));
  }
  for (const auto& p : params.items())
    if (!seen.count(p.name)) problems.push_back(p.name + ": missing from checkpoint");
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw ShapeError(msg);
  }
  for (const auto& s : stored) {
    Tensor p = params.at(s.name);
    std::copy(s.data.begin(), s.data.end(), p.leaf_data().begin());
  }
}

// Builds a model from a checkpoint's stored configuration and weights.
inline Model model_from_checkpoint(const Checkpoint& c) {
  Model m(c.config.model);
  restore_params(m.params(), c.params);
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct StepLosses {
  std::uint64_t step = 0;
  double reconstruction = 0, perceptual = 0, depth = 0, edge = 0, total = 0;
  bool operator==(const StepLosses&) const = default;
};

inline std::string loss_csv_header() { return "step,L_reco,L_vgg,L_depth,L_edge,total\n"; }

inline std::string loss_csv_row(const StepLosses& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(s.step),
                s.reconstruction, s.perceptual, s.depth, s.edge, s.total);
  return buf;
}

struct Batch {
  Tensor source, target;  // [B,3,H,W]
  std::vector<RigidTransform> s_to_t;
  Intrinsics K;
};

inline Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  std::vector<Tensor> src, tgt;
  b.K = samples.front().K;
  for (const auto& s : samples) {
    if (!(s.K == b.K)) throw DataError("make_batch: samples in one batch must share intrinsics");
    src.push_back(s.source_img);
    tgt.push_back(s.target_img);
    b.s_to_t.push_back(s.s_to_t);
  }
  b.source = stack(src);
  b.target = stack(tgt);
  return b;
}

// Forward pass and the four loss parts. A part whose weight is zero is still
// evaluated for logging, without recording a graph.
inline LossParts compute_losses(const Model& model, const Batch& batch, const LossWeights& w,
                                const PerceptualExtractor& extractor, ForwardResult* out = nullptr) {
  ForwardResult r = model.forward(batch.source, batch.s_to_t, batch.K);
  auto maybe_frozen = [](double weight, auto&& f) {
    if (weight != 0) return f();
    NoGradGuard ng;
    return f();
  };
  LossParts parts;
  parts.reconstruction = maybe_frozen(w.reconstruction, [&] {
    return multiscale_reconstruction(r.predictions, batch.target, w.aligned(r.predictions.size()));
  });
  parts.perceptual =
      maybe_frozen(w.perceptual, [&] { return perceptual_loss(r.predictions.back(), batch.target, extractor); });
  parts.depth = maybe_frozen(w.depth, [&] {
    const Encoding enc_t = model.encode(batch.target);
    return depth_consistency(model.decode_depth(enc_t.latent), r.depth);
  });
  parts.edge = maybe_frozen(w.edge, [&] { return edge_aware_smoothness(r.depth, batch.target); });
  if (out) *out = std::move(r);
  return parts;
}

struct TrainResult {
  std::vector<StepLosses> losses;  // steps run in this call
  std::filesystem::path checkpoint;
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::ostream* log = nullptr;
  // Stop after this many steps of this call even if config.steps is not reached.
  std::optional<std::size_t> max_steps_this_run;
};

inline std::vector<std::size_t> training_indices(const SceneDataset& ds, std::size_t max_pairs) {
  auto idx = ds.indices(Split::train);
  if (idx.empty()) throw DataError("dataset " + ds.root.string() + " has no training pairs");
  if (max_pairs && idx.size() > max_pairs) idx.resize(max_pairs);
  return idx;
}

inline TrainResult train(const TrainConfig& config_in, const TrainOptions& opt = {}) {
  TrainConfig config = config_in;
  Model model(config.model);
  AdamState adam = make_adam(model.params(), config.lr);
  adam.beta1 = config.beta1;
  adam.beta2 = config.beta2;
  adam.eps = config.eps;
  std::mt19937_64 rng(config.seed);
  std::uint64_t step = 0;

  if (opt.resume) {
    Checkpoint c = load_checkpoint(*opt.resume);
    restore_params(model.params(), c.params);
    adam = c.adam;
    rng = rng_from_string(c.rng_state);
    step = c.step;
  }
  config.validate();

  const SceneDataset ds = load_dataset(config.dataset);
  if (ds.width != config.model.width || ds.height != config.model.height)
    throw DataError(detail::cat("dataset images are ", ds.width, "x", ds.height, " but the model expects ",
                                config.model.width, "x", config.model.height));
  const auto pool = training_indices(ds, config.max_pairs);
  const PerceptualExtractor extractor = make_extractor(config);

  namespace fs = std::filesystem;
  fs::create_directories(config.out_dir);
  const fs::path ckpt = fs::path(config.out_dir) / "checkpoint.bin";
  const fs::path csv_path = fs::path(config.out_dir) / "loss.csv";
  std::ofstream csv(csv_path, opt.resume ? std::ios::app : std::ios::trunc);
  if (!csv) throw DataError("cannot write " + csv_path.string());
  if (!opt.resume) csv << loss_csv_header();

  TrainResult result;
  result.checkpoint = ckpt;
  std::size_t ran = 0;
  while (step < config.steps && (!opt.max_steps_this_run || ran < *opt.max_steps_this_run)) {
    std::vector<Sample> samples;
    for (std::size_t b = 0; b < config.batch_size; ++b) samples.push_back(ds.sample(pool[rng() % pool.size()]));
    const Batch batch = make_batch(samples);

    model.params().zero_grad();
    const LossParts parts = compute_losses(model, batch, config.loss, extractor);
    Tensor total;
    try {
      total = total_loss(parts, config.loss);
      if (!std::isfinite(total.item())) throw NumericalError(detail::cat("total loss is ", total.item()));
    } catch (const NumericalError& e) {
      throw NumericalError(detail::cat("step ", step + 1, ": ", e.what(), "; last good checkpoint kept at ",
                                       ckpt.string()));
    }
    backward(total);
    adam_step(model.params(), adam);
    ++step;
    ++ran;

    const StepLosses row{step, parts.reconstruction.item(), parts.perceptual.item(), parts.depth.item(),
                         parts.edge.item(), total.item()};
    result.losses.push_back(row);
    csv << loss_csv_row(row);
    if (opt.log && config.log_every && step % config.log_every == 0)
      *opt.log << "step " << step << " total " << row.total << " reco " << row.reconstruction << "\n";
    if ((config.checkpoint_every && step % config.checkpoint_every == 0) || step == config.steps)
      save_checkpoint(ckpt, model.params(), adam, config, step, rng);
  }
  csv.flush();
  if (ran && step != config.steps && !(config.checkpoint_every && step % config.checkpoint_every == 0))
    save_checkpoint(ckpt, model.params(), adam, config, step, rng);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  std::size_t batch_size = 8;
  // Restrict depth metrics to foreground pixels (ground truth nearer than the far plane).
  bool foreground_only = true;
};

inline std::vector<MetricReport> evaluate(const Model& model, const SceneDataset& ds,
                                          const std::vector<std::size_t>& indices, const EvalOptions& opt = {}) {
  NoGradGuard ng;
  std::vector<MetricReport> rows;
  const std::size_t H = ds.height, W = ds.width;
  for (std::size_t start = 0; start < indices.size(); start += opt.batch_size) {
    const std::size_t end = std::min(indices.size(), start + opt.batch_size);
    std::vector<Sample> samples;
    for (std::size_t k = start; k < end; ++k) samples.push_back(ds.sample(indices[k]));
    const Batch batch = make_batch(samples);
    const ForwardResult r = model.forward(batch.source, batch.s_to_t, batch.K);
    const Tensor& pred = r.predictions.back();
    const Tensor depth = resize_bilinear(r.depth, H, W, false);
    const std::size_t img = 3 * H * W, hw = H * W;
    for (std::size_t b = 0; b < samples.size(); ++b) {
      const Sample& s = samples[b];
      MetricReport m;
      m.id = s.id;
      const auto p = pred.data().subspan(b * img, img);
      m.l1 = l1_error(p, s.target_img.data());
      m.ssim = ssim(p, s.target_img.data(), 3, H, W);
      if (s.gt_depth_t) {
        const auto gt = s.gt_depth_t->data();
        std::vector<std::uint8_t> mask(hw, 1);
        if (opt.foreground_only && s.far_depth > 0)
          for (std::size_t q = 0; q < hw; ++q) mask[q] = gt[q] < s.far_depth * (1 - 1e-6);
        if (std::any_of(mask.begin(), mask.end(), [](auto v) { return v; }))
          m.depth = depth_metrics(depth.data().subspan(b * hw, hw), gt, mask);
      }
      rows.push_back(m);
    }
  }
  return rows;
}

}  // namespace nvs
