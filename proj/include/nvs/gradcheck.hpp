#pragma once

// Central finite-difference gradient checks for the differentiable
// primitives and for a complete tiny model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/losses.hpp"
#include "nvs/model.hpp"
#include "nvs/ops.hpp"
#include "nvs/warp.hpp"

namespace nvs {

struct GradCheckResult {
  std::string name;
  double max_error = 0;  // max |analytic - fd| / max(1, |fd|)
  std::size_t checked = 0;
  double tolerance = 0;
  bool passed() const { return max_error < tolerance; }
};

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Non-scalar outputs are reduced to a scalar with a fixed random projection
// so every output element contributes to the checked gradient.
inline GradCheckResult check_gradients(const std::string& name, const GradFn& f, std::vector<Tensor> inputs,
                                       double step = 1e-4, double tolerance = 1e-4, std::uint64_t seed = 11) {
  Tensor projection;
  auto scalar = [&](const Tensor& out) {
    if (out.numel() == 1) return reshape(out, {1});
    if (!projection.defined()) {
      std::mt19937_64 rng(seed);
      projection = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
    }
    return sum(mul(out, projection));
  };
  for (auto& t : inputs) t.zero_grad();
  backward(scalar(f(inputs)));

  GradCheckResult r{name, 0.0, 0, tolerance};
  NoGradGuard ng;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto x = t.leaf_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + step;
      const double fp = scalar(f(inputs)).item();
      x[i] = orig - step;
      const double fm = scalar(f(inputs)).item();
      x[i] = orig;
      const double fd = (fp - fm) / (2 * step);
      r.max_error = std::max(r.max_error, std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(fd)));
      ++r.checked;
    }
  }
  return r;
}

namespace detail {

inline Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(shape), lo, hi, rng, true);
}

// Random values kept at least `gap` away from zero, for ops with a kink at 0.
inline Tensor rand_away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  Tensor t = Tensor::uniform(std::move(shape), gap, 1.0, rng, true);
  std::bernoulli_distribution flip(0.5);
  for (auto& v : t.leaf_data())
    if (flip(rng)) v = -v;
  return t;
}

inline Tensor with_grad(Tensor t) { return Tensor(t.shape(), {t.data().begin(), t.data().end()}, true); }

}  // namespace detail

// One check per differentiable primitive and loss, on small random tensors.
inline std::vector<GradCheckResult> primitive_grad_checks(double step = 1e-4, double tol = 1e-4,
                                                          std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  using detail::rand_away_from_zero;
  using detail::rand_tensor;
  using V = const std::vector<Tensor>&;
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, const GradFn& f, std::vector<Tensor> in) {
    out.push_back(check_gradients(name, f, std::move(in), step, tol, seed + out.size()));
  };

  run("conv2d 3x3 stride 1 pad 1", [](V v) { return conv2d(v[0], v[1], v[2], 1, 1); },
      {rand_tensor({2, 3, 5, 5}, rng), rand_tensor({4, 3, 3, 3}, rng), rand_tensor({4}, rng)});
  run("conv2d 4x4 stride 2 pad 1", [](V v) { return conv2d(v[0], v[1], v[2], 2, 1); },
      {rand_tensor({1, 2, 6, 6}, rng), rand_tensor({3, 2, 4, 4}, rng), rand_tensor({3}, rng)});
  run("conv2d 3x3 stride 2 pad 0 no bias", [](V v) { return conv2d(v[0], v[1], Tensor(), 2, 0); },
      {rand_tensor({1, 2, 7, 7}, rng), rand_tensor({2, 2, 3, 3}, rng)});
  run("linear", [](V v) { return linear(v[0], v[1], v[2]); },
      {rand_tensor({3, 4}, rng), rand_tensor({5, 4}, rng), rand_tensor({5}, rng)});
  run("relu", [](V v) { return relu(v[0]); }, {rand_away_from_zero({2, 7}, rng)});
  run("leaky_relu", [](V v) { return leaky_relu(v[0], 0.2); }, {rand_away_from_zero({2, 7}, rng)});
  run("elu", [](V v) { return elu(v[0]); }, {rand_away_from_zero({2, 7}, rng)});
  run("sigmoid", [](V v) { return sigmoid(v[0]); }, {rand_tensor({2, 7}, rng, -3, 3)});
  run("tanh", [](V v) { return nvs::tanh(v[0]); }, {rand_tensor({2, 7}, rng, -2, 2)});
  run("abs", [](V v) { return nvs::abs(v[0]); }, {rand_away_from_zero({9}, rng)});
  run("exp", [](V v) { return nvs::exp(v[0]); }, {rand_tensor({9}, rng)});
  run("reciprocal", [](V v) { return reciprocal(v[0]); }, {rand_tensor({9}, rng, 0.5, 2.0)});
  run("scale and add_scalar", [](V v) { return add_scalar(scale(v[0], -1.7), 0.3); }, {rand_tensor({9}, rng)});
  run("add", [](V v) { return add(v[0], v[1]); }, {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
  run("sub", [](V v) { return sub(v[0], v[1]); }, {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
  run("mul", [](V v) { return mul(v[0], v[1]); }, {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
  run("sum", [](V v) { return sum(v[0]); }, {rand_tensor({3, 4}, rng)});
  run("mean", [](V v) { return mean(v[0]); }, {rand_tensor({3, 4}, rng)});
  run("mean_abs_diff", [](V v) { return mean_abs_diff(v[0], v[1]); },
      {rand_tensor({2, 5}, rng, 0.0, 0.4), rand_tensor({2, 5}, rng, 0.6, 1.0)});
  run("reshape", [](V v) { return reshape(v[0], {4, 3}); }, {rand_tensor({2, 6}, rng)});
  run("concat_channels", [](V v) { return concat_channels(v[0], v[1]); },
      {rand_tensor({2, 2, 3, 3}, rng), rand_tensor({2, 3, 3, 3}, rng)});
  run("resize_bilinear up", [](V v) { return resize_bilinear(v[0], 7, 6, false); }, {rand_tensor({1, 2, 4, 3}, rng)});
  run("resize_bilinear down", [](V v) { return resize_bilinear(v[0], 2, 3, false); }, {rand_tensor({1, 2, 4, 6}, rng)});
  run("resize_bilinear align_corners", [](V v) { return resize_bilinear(v[0], 5, 7, true); },
      {rand_tensor({2, 1, 3, 4}, rng)});

  // Sampling coordinates away from integer pixel-centre offsets, some outside the image.
  Tensor coords = Tensor::uniform({1, 2, 3, 4}, -1.3, 5.3, rng, true);
  for (auto& c : coords.leaf_data()) {
    const double frac = c - 0.5 - std::floor(c - 0.5);
    if (frac < 0.05) c += 0.07;
    if (frac > 0.95) c -= 0.07;
  }
  run("bilinear_sample", [](V v) { return bilinear_sample(v[0], v[1]); }, {rand_tensor({1, 2, 4, 5}, rng), coords});

  {
    std::vector<RigidTransform> poses{RigidTransform::from_values(
                                          std::vector<double>{std::cos(0.3), 0, std::sin(0.3), 0, 1, 0, -std::sin(0.3),
                                                              0, std::cos(0.3), 0.2, -0.1, 0.3}),
                                      pose_from_orbit(20, 10, 4.0)};
    run("transform_latent", [poses](V v) { return transform_latent(v[0], poses); }, {rand_tensor({2, 3, 3}, rng)});

    const Intrinsics K = default_intrinsics(8, 8);
    const RigidTransform small = relative_pose(pose_from_orbit(0, 0, 4.0), pose_from_orbit(7, 3, 4.0));
    run("correspondence_field", [K, small](V v) { return correspondence_field(v[0], K, small).coords; },
        {rand_tensor({1, 1, 8, 8}, rng, 3.0, 4.0)});
    run("warp_feature", [K, small](V v) { return warp_feature(v[0], v[1], K, small).features; },
        {rand_tensor({1, 2, 4, 4}, rng), rand_tensor({1, 1, 4, 4}, rng, 3.0, 4.0)});
  }

  {
    const Tensor target = Tensor::uniform({1, 3, 8, 8}, 0.0, 1.0, rng);
    const auto w = LossWeights{}.aligned(2);
    run("multiscale_reconstruction",
        [target, w](V v) { return multiscale_reconstruction({v[0], v[1]}, target, w); },
        {rand_tensor({1, 3, 4, 4}, rng, 1.2, 2.0), rand_tensor({1, 3, 8, 8}, rng, 1.2, 2.0)});
    const auto extractor = PerceptualExtractor::random(7);
    run("perceptual_loss", [target, &extractor](V v) { return perceptual_loss(v[0], target, extractor); },
        {rand_tensor({1, 3, 8, 8}, rng, 0.0, 1.0)});
    run("depth_consistency", [](V v) { return depth_consistency(v[0], v[1]); },
        {rand_tensor({1, 1, 3, 3}, rng, 1.0, 2.0), rand_tensor({1, 1, 3, 3}, rng, 2.5, 3.0)});
    Tensor steep = rand_tensor({1, 1, 4, 4}, rng);
    for (std::size_t k = 0; k < steep.numel(); ++k) steep.leaf_data()[k] += 0.3 * static_cast<double>(k);
    run("edge_aware_smoothness", [target](V v) { return edge_aware_smoothness(v[0], target); }, {steep});
  }
  return out;
}

// End-to-end check of the full training objective on the tiny model with
// respect to every parameter.
inline GradCheckResult model_grad_check(double step = 1e-5, double tol = 1e-3, std::uint64_t seed = 9) {
  const ModelConfig cfg = tiny_model_config();
  Model model(cfg);
  std::mt19937_64 rng(seed);
  const Tensor src = Tensor::uniform({2, 3, cfg.height, cfg.width}, 0.0, 1.0, rng);
  const Tensor tgt = Tensor::uniform({2, 3, cfg.height, cfg.width}, 0.0, 1.0, rng);
  const std::vector<RigidTransform> poses{relative_pose(pose_from_orbit(0, 0, 4), pose_from_orbit(20, 10, 4)),
                                          relative_pose(pose_from_orbit(40, 0, 4), pose_from_orbit(20, 20, 4))};
  const Intrinsics K = default_intrinsics(cfg.width, cfg.height);
  const LossWeights w;
  const auto extractor = PerceptualExtractor::random(7);
  std::vector<Tensor> params;
  for (const auto& p : model.params().items()) params.push_back(p.tensor);
  auto loss = [&](const std::vector<Tensor>&) {
    ForwardResult r = model.forward(src, poses, K);
    LossParts parts;
    parts.reconstruction = multiscale_reconstruction(r.predictions, tgt, w.aligned(r.predictions.size()));
    parts.perceptual = perceptual_loss(r.predictions.back(), tgt, extractor);
    parts.depth = depth_consistency(model.decode_depth(model.encode(tgt).latent), r.depth);
    parts.edge = edge_aware_smoothness(r.depth, tgt);
    return total_loss(parts, w);
  };
  return check_gradients("tiny model end-to-end", loss, params, step, tol, seed);
}

}  // namespace nvs
