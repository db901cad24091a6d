#pragma once

// Training objectives: multi-scale L1 reconstruction, perceptual feature
// distance, depth consistency between encoded and transformed latents,
// edge-aware depth smoothness, and their weighted total.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "nvs/ops.hpp"
#include "nvs/serialize.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

struct LossWeights {
  double reconstruction = 1.0;  // lambda_m
  double perceptual = 0.01;     // lambda_v
  double depth = 1.0;           // lambda_d
  double edge = 0.1;            // lambda_e
  // Per-scale reconstruction weights, finest first.
  std::vector<double> scales{1.0, 0.5, 0.25, 0.125};

  void validate() const {
    for (double w : {reconstruction, perceptual, depth, edge})
      if (!(w >= 0)) throw std::invalid_argument(detail::cat("loss weights must be nonnegative, got ", w));
    if (scales.empty()) throw std::invalid_argument("loss weights: no scale weights");
    for (double w : scales) {
      if (!(w >= 0)) throw std::invalid_argument("loss weights: negative scale weight");
      if (w > scales.front()) throw std::invalid_argument("loss weights: the finest scale must carry the largest weight");
    }
  }

  // Scale weights aligned with a coarse-to-fine prediction list.
  std::vector<double> aligned(std::size_t count) const {
    if (count > scales.size())
      throw ShapeError(detail::cat("loss weights: ", count, " predictions but only ", scales.size(), " scale weights"));
    return std::vector<double>(scales.rend() - static_cast<long>(count), scales.rend());
  }

  bool operator==(const LossWeights&) const = default;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"reconstruction", w.reconstruction}, {"perceptual", w.perceptual}, {"depth", w.depth},
       {"edge", w.edge}, {"scales", w.scales}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "reconstruction" && it.key() != "perceptual" && it.key() != "depth" && it.key() != "edge" &&
        it.key() != "scales")
      throw std::invalid_argument("loss weights: unknown key '" + it.key() + "'");
  LossWeights d;
  w.reconstruction = j.value("reconstruction", d.reconstruction);
  w.perceptual = j.value("perceptual", d.perceptual);
  w.depth = j.value("depth", d.depth);
  w.edge = j.value("edge", d.edge);
  w.scales = j.value("scales", d.scales);
}

// Sum over scales of w_i * mean |upsample(pred_i) - target|. `weights` is
// aligned with `preds`.
inline Tensor multiscale_reconstruction(const std::vector<Tensor>& preds, const Tensor& target,
                                        const std::vector<double>& weights) {
  if (preds.size() != weights.size())
    throw ShapeError(detail::cat("multiscale_reconstruction: ", preds.size(), " predictions but ", weights.size(),
                                 " weights"));
  if (preds.empty()) throw ShapeError("multiscale_reconstruction: no predictions");
  detail::require_rank(target, 4, "multiscale_reconstruction target");
  Tensor total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    Tensor up = resize_bilinear(preds[i], target.dim(2), target.dim(3), false);
    Tensor term = scale(mean_abs_diff(up, target), weights[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// Fixed (non-trainable) convolutional feature pyramid standing in for a
// pretrained classification network.
class PerceptualExtractor {
 public:
  struct Stage {
    Tensor weight, bias;
    std::size_t stride = 1;
  };

  PerceptualExtractor() = default;
  explicit PerceptualExtractor(std::vector<Stage> stages) : stages_(std::move(stages)) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const auto& s = stages_[i];
      const std::size_t cin = i == 0 ? 3 : stages_[i - 1].weight.dim(0);
      if (s.weight.rank() != 4 || s.weight.dim(1) != cin || s.bias.rank() != 1 || s.bias.dim(0) != s.weight.dim(0))
        throw ShapeError(detail::cat("perceptual stage ", i, ": weight ", to_string(s.weight.shape()), " bias ",
                                     to_string(s.bias.shape())));
      if (s.weight.requires_grad() || s.bias.requires_grad())
        throw std::invalid_argument("perceptual extractor weights must be frozen");
    }
  }

  // Three stages 3->8->16->32 (3x3 stride 1, then 4x4 stride 2 twice), seeded.
  static PerceptualExtractor random(std::uint64_t seed = 7) {
    std::mt19937_64 rng(seed);
    const std::size_t cins[] = {3, 8, 16}, couts[] = {8, 16, 32}, ks[] = {3, 4, 4}, strides[] = {1, 2, 2};
    std::vector<Stage> st;
    for (int i = 0; i < 3; ++i) {
      const double bound = std::sqrt(3.0 / static_cast<double>(cins[i] * ks[i] * ks[i]));
      st.push_back({Tensor::uniform({couts[i], cins[i], ks[i], ks[i]}, -bound, bound, rng),
                    Tensor::uniform({couts[i]}, -0.1, 0.1, rng), strides[i]});
    }
    return PerceptualExtractor(std::move(st));
  }

  // Tensor file with "stage<i>.weight", "stage<i>.bias" and a JSON header
  // {"strides": [...]}; stage 0 takes 3 input channels.
  static PerceptualExtractor load(const std::filesystem::path& path) {
    const TensorFile f = load_tensor_file(path);
    std::vector<std::size_t> strides;
    try {
      strides = nlohmann::json::parse(f.header).at("strides").get<std::vector<std::size_t>>();
    } catch (const std::exception& e) {
      throw DataError(path.string() + ": perceptual weights header needs \"strides\": " + e.what());
    }
    std::vector<Stage> st;
    for (std::size_t i = 0; i < strides.size(); ++i) {
      const auto* w = f.find(detail::cat("stage", i, ".weight"));
      const auto* b = f.find(detail::cat("stage", i, ".bias"));
      if (!w || !b) throw DataError(detail::cat(path.string(), ": missing tensors for stage ", i));
      st.push_back({Tensor(w->shape, w->data), Tensor(b->shape, b->data), strides[i]});
    }
    return PerceptualExtractor(std::move(st));
  }

  void save(const std::filesystem::path& path) const {
    TensorFile f;
    std::vector<std::size_t> strides;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const auto& s = stages_[i];
      strides.push_back(s.stride);
      f.tensors.push_back({detail::cat("stage", i, ".weight"), s.weight.shape(), {s.weight.data().begin(), s.weight.data().end()}});
      f.tensors.push_back({detail::cat("stage", i, ".bias"), s.bias.shape(), {s.bias.data().begin(), s.bias.data().end()}});
    }
    f.header = nlohmann::json{{"strides", strides}}.dump();
    save_tensor_file(path, f);
  }

  std::vector<Tensor> features(const Tensor& img) const {
    std::vector<Tensor> out;
    Tensor x = img;
    for (const auto& s : stages_) {
      const std::size_t k = s.weight.dim(2);
      // Same-size output for odd kernels, exact halving for even kernels with stride 2.
      const std::size_t pad = (k - s.stride + 1) / 2;
      x = relu(conv2d(x, s.weight, s.bias, s.stride, pad));
      out.push_back(x);
    }
    return out;
  }

  const std::vector<Stage>& stages() const { return stages_; }

 private:
  std::vector<Stage> stages_;
};

// Sum over extractor stages of the mean L1 feature distance.
inline Tensor perceptual_loss(const Tensor& pred, const Tensor& target, const PerceptualExtractor& extractor) {
  detail::require_same_shape(pred, target, "perceptual_loss");
  const auto fp = extractor.features(pred);
  const auto ft = extractor.features(target);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < fp.size(); ++i) total = add(total, mean_abs_diff(fp[i], ft[i]));
  return total;
}

// mean |decode(z_encoded) - decode(z_transformed)| where decode is the depth decoder.
inline Tensor depth_consistency(const Tensor& z_t_encoded, const Tensor& z_t_transformed,
                                const std::function<Tensor(const Tensor&)>& depth_decoder) {
  detail::require_same_shape(z_t_encoded, z_t_transformed, "depth_consistency");
  return mean_abs_diff(depth_decoder(z_t_encoded), depth_decoder(z_t_transformed));
}

// Depth-map form of the consistency term for precomputed depth maps.
inline Tensor depth_consistency(const Tensor& depth_a, const Tensor& depth_b) {
  return mean_abs_diff(depth_a, depth_b);
}

// (1/N) sum |dx D| exp(-|dx I|) + |dy D| exp(-|dy I|), forward differences,
// |dI| the mean absolute difference over colour channels. N counts the
// difference terms: H(W-1) + (H-1)W per image. The image is data.
inline Tensor edge_aware_smoothness(const Tensor& depth, const Tensor& image) {
  detail::require_rank(depth, 4, "edge_aware_smoothness depth");
  detail::require_rank(image, 4, "edge_aware_smoothness image");
  if (depth.dim(1) != 1 || depth.dim(0) != image.dim(0))
    throw ShapeError(detail::cat("edge_aware_smoothness: depth ", to_string(depth.shape()), " image ",
                                 to_string(image.shape())));
  const std::size_t B = depth.dim(0), H = depth.dim(2), W = depth.dim(3), C = image.dim(1);
  Tensor img = image.detach();
  if (img.dim(2) != H || img.dim(3) != W) {
    NoGradGuard ng;
    img = resize_bilinear(img, H, W, false);
  }
  const std::size_t hw = H * W;
  const double N = static_cast<double>(B * (H * (W - 1) + (H - 1) * W));
  if (N == 0) return Tensor::scalar(0.0);
  // Edge weights per difference position.
  std::vector<double> wx(B * hw, 0.0), wy(B * hw, 0.0);
  const auto I = img.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t p = i * W + j;
        if (j + 1 < W) {
          double g = 0;
          for (std::size_t c = 0; c < C; ++c)
            g += std::fabs(I[(b * C + c) * hw + p + 1] - I[(b * C + c) * hw + p]);
          wx[b * hw + p] = std::exp(-g / static_cast<double>(C));
        }
        if (i + 1 < H) {
          double g = 0;
          for (std::size_t c = 0; c < C; ++c)
            g += std::fabs(I[(b * C + c) * hw + p + W] - I[(b * C + c) * hw + p]);
          wy[b * hw + p] = std::exp(-g / static_cast<double>(C));
        }
      }
  const auto D = depth.data();
  double total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t q = b * hw + i * W + j;
        if (j + 1 < W) total += std::fabs(D[q + 1] - D[q]) * wx[q];
        if (i + 1 < H) total += std::fabs(D[q + W] - D[q]) * wy[q];
      }
  return detail::make_result("edge_aware_smoothness", {1}, {total / N}, {depth},
                             [wx = std::move(wx), wy = std::move(wy), B, H, W, hw, N](Node& self) {
    double* g = detail::input_grad(self, 0);
    if (!g) return;
    const auto& D = self.inputs[0]->data;
    const double go = self.grad[0] / N;
    auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const std::size_t q = b * hw + i * W + j;
          if (j + 1 < W) {
            const double s = sgn(D[q + 1] - D[q]) * wx[q] * go;
            g[q + 1] += s;
            g[q] -= s;
          }
          if (i + 1 < H) {
            const double s = sgn(D[q + W] - D[q]) * wy[q] * go;
            g[q + W] += s;
            g[q] -= s;
          }
        }
  });
}

struct LossParts {
  Tensor reconstruction, perceptual, depth, edge;
};

// Weighted sum of the four parts; refuses non-finite parts by name.
inline Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  const std::pair<const char*, const Tensor*> named[] = {{"reconstruction", &parts.reconstruction},
                                                         {"perceptual", &parts.perceptual},
                                                         {"depth", &parts.depth},
                                                         {"edge", &parts.edge}};
  for (const auto& [name, t] : named) {
    if (!t->defined() || t->numel() != 1)
      throw ShapeError(detail::cat("total_loss: part '", name, "' is not a scalar"));
    if (!std::isfinite(t->item()))
      throw NumericalError(detail::cat("total_loss: part '", name, "' is ", t->item()));
  }
  Tensor total = scale(parts.reconstruction, w.reconstruction);
  total = add(total, scale(parts.perceptual, w.perceptual));
  total = add(total, scale(parts.depth, w.depth));
  total = add(total, scale(parts.edge, w.edge));
  return total;
}

}  // namespace nvs
