#pragma once

// Transforming auto-encoder with depth-guided skip connections.
//
//   encoder      image -> feature pyramid conv0..conv{L-1} + latent points [B,n,3]
//   depth dec.   latent -> depth map at a configurable native level
//   pixel dec.   latent + warped skips -> multi-scale images (finest last)
//
// The relative pose is consumed in exactly two places: transform_latent on
// the latent points and the correspondence field inside warp_feature.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "nvs/geometry.hpp"
#include "nvs/ops.hpp"
#include "nvs/tensor.hpp"
#include "nvs/warp.hpp"

namespace nvs {

struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  // Channel width of each pyramid level conv0..conv{L-1}; L = channels.size().
  std::vector<std::size_t> channels{16, 32, 64, 96, 128};
  std::size_t latent_points = 192;
  double depth_min = 2.0;
  double depth_max = 10.0;
  std::vector<int> skip_levels{0, 2, 3, 4};
  // Pyramid levels with an image output; level 0 (full resolution) is required.
  std::vector<int> output_levels{3, 2, 1, 0};
  // Depth is decoded at resolution H / 2^depth_level.
  int depth_level = 1;
  Activation act = Activation::elu;
  std::uint64_t seed = 1;

  int levels() const { return static_cast<int>(channels.size()); }

  std::size_t level_height(int l) const { return height >> l; }
  std::size_t level_width(int l) const { return width >> l; }

  bool has_skip(int l) const { return std::find(skip_levels.begin(), skip_levels.end(), l) != skip_levels.end(); }
  bool has_output(int l) const {
    return std::find(output_levels.begin(), output_levels.end(), l) != output_levels.end();
  }

  void validate() const {
    const int L = levels();
    if (L < 2 || L > 6) throw std::invalid_argument(detail::cat("model: need 2..6 pyramid levels, got ", L));
    const std::size_t div = std::size_t{1} << (L - 1);
    if (height % div || width % div || height == 0 || width == 0)
      throw std::invalid_argument(detail::cat("model: image ", width, "x", height, " not divisible by ", div));
    if (latent_points == 0) throw std::invalid_argument("model: latent_points must be positive");
    if (!(depth_min > 0 && depth_max > depth_min))
      throw std::invalid_argument(detail::cat("model: bad depth range (", depth_min, ", ", depth_max, ")"));
    for (int l : skip_levels)
      if (l < 0 || l >= L) throw std::invalid_argument(detail::cat("model: skip level conv", l, " does not exist"));
    if (std::set<int>(skip_levels.begin(), skip_levels.end()).size() != skip_levels.size())
      throw std::invalid_argument("model: duplicate skip level");
    if (output_levels.empty() || output_levels.back() != 0)
      throw std::invalid_argument("model: output levels must end with the full-resolution level 0");
    for (std::size_t i = 0; i < output_levels.size(); ++i) {
      if (output_levels[i] < 0 || output_levels[i] >= L)
        throw std::invalid_argument(detail::cat("model: output level ", output_levels[i], " does not exist"));
      if (i && output_levels[i] >= output_levels[i - 1])
        throw std::invalid_argument("model: output levels must be strictly coarse-to-fine");
    }
    if (depth_level < 0 || depth_level >= L)
      throw std::invalid_argument(detail::cat("model: depth level ", depth_level, " does not exist"));
    for (auto c : channels)
      if (c == 0) throw std::invalid_argument("model: zero channel width");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"height", c.height},
       {"width", c.width},
       {"channels", c.channels},
       {"latent_points", c.latent_points},
       {"depth_min", c.depth_min},
       {"depth_max", c.depth_max},
       {"skip_levels", c.skip_levels},
       {"output_levels", c.output_levels},
       {"depth_level", c.depth_level},
       {"activation", activation_name(c.act)},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known{"height", "width", "channels", "latent_points", "depth_min", "depth_max",
                                           "skip_levels", "output_levels", "depth_level", "activation", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw std::invalid_argument("model config: unknown key '" + it.key() + "'");
  ModelConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.channels = j.value("channels", d.channels);
  c.latent_points = j.value("latent_points", d.latent_points);
  c.depth_min = j.value("depth_min", d.depth_min);
  c.depth_max = j.value("depth_max", d.depth_max);
  c.skip_levels = j.value("skip_levels", d.skip_levels);
  c.output_levels = j.value("output_levels", d.output_levels);
  c.depth_level = j.value("depth_level", d.depth_level);
  c.act = parse_activation(j.value("activation", std::string(activation_name(d.act))));
  c.seed = j.value("seed", d.seed);
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered, named parameter set; the order is the serialization order.
class ParamSet {
 public:
  Tensor add(std::string name, Tensor t) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.push_back({std::move(name), t});
    return t;
  }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return items_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::span<const NamedTensor> items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& it : items_) n += it.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& it : items_) it.tensor.zero_grad();
  }

 private:
  std::vector<NamedTensor> items_;
  std::map<std::string, std::size_t> index_;
};

struct FeaturePyramid {
  std::vector<Tensor> levels;  // conv0 .. conv{L-1}
  const Tensor& operator[](int l) const { return levels.at(static_cast<std::size_t>(l)); }
};

struct Encoding {
  FeaturePyramid pyramid;
  Tensor latent;  // [B, n, 3]
};

struct ForwardResult {
  std::vector<Tensor> predictions;  // coarse to fine
  Tensor depth;                     // target-view depth at the native level
  Tensor latent;                    // transformed latent
  Encoding source;
  std::map<int, WarpedFeature> warped;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Image [B,3,H,W] in [0,1] -> pyramid and latent points.
  Encoding encode(const Tensor& img) const {
    if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) != cfg_.height || img.dim(3) != cfg_.width)
      throw ShapeError(detail::cat("encode: expected [B,3,", cfg_.height, ",", cfg_.width, "], got ",
                                   to_string(img.shape())));
    Encoding e;
    Tensor x = act(conv("enc.conv0", img, 1, 1));
    e.pyramid.levels.push_back(x);
    for (int l = 1; l < cfg_.levels(); ++l) {
      x = act(conv("enc.conv" + std::to_string(l), x, 2, 1));
      e.pyramid.levels.push_back(x);
    }
    const std::size_t B = img.dim(0);
    Tensor flat = reshape(x, {B, x.numel() / B});
    Tensor z = linear(flat, params_.at("enc.latent.weight"), params_.at("enc.latent.bias"));
    e.latent = reshape(z, {B, cfg_.latent_points, 3});
    return e;
  }

  // Latent points -> depth in (depth_min, depth_max) via bounded disparity.
  Tensor decode_depth(const Tensor& z) const {
    Tensor x = from_latent("dep", z);
    const int L = cfg_.levels();
    for (int l = L - 2; l >= cfg_.depth_level; --l) {
      x = resize_bilinear(x, cfg_.level_height(l), cfg_.level_width(l), false);
      x = act(conv("dep.up" + std::to_string(l), x, 1, 1));
    }
    return disparity_to_depth(conv("dep.out", x, 1, 1));
  }

  // Maps a raw decoder output to depth: sigmoid -> disparity in
  // [1/depth_max, 1/depth_min] -> reciprocal.
  Tensor disparity_to_depth(const Tensor& pre) const {
    const double dmin = 1.0 / cfg_.depth_max, dspan = 1.0 / cfg_.depth_min - 1.0 / cfg_.depth_max;
    return reciprocal(add_scalar(scale(sigmoid(pre), dspan), dmin));
  }

  // Latent points plus warped skips -> images at each output level, coarse to fine.
  std::vector<Tensor> decode_pixels(const Tensor& z_t, const std::map<int, WarpedFeature>& warped) const {
    for (int l : cfg_.skip_levels)
      if (!warped.count(l)) throw ShapeError(detail::cat("decode_pixels: missing warped skip for conv", l));
    std::vector<Tensor> outputs;
    const int L = cfg_.levels();
    Tensor x = from_latent("pix", z_t);
    for (int l = L - 1; l >= 0; --l) {
      if (l < L - 1) {
        x = resize_bilinear(x, cfg_.level_height(l), cfg_.level_width(l), false);
        x = act(conv("pix.up" + std::to_string(l), x, 1, 1));
      }
      if (cfg_.has_skip(l)) {
        const Tensor& f = warped.at(l).features;
        if (f.rank() != 4 || f.dim(2) != x.dim(2) || f.dim(3) != x.dim(3) || f.dim(1) != cfg_.channels[l])
          throw ShapeError(detail::cat("decode_pixels: warped conv", l, " has shape ", to_string(f.shape())));
        x = concat_channels(x, f);
      }
      x = act(conv("pix.fuse" + std::to_string(l), x, 1, 1));
      if (cfg_.has_output(l)) outputs.push_back(sigmoid(conv("pix.out" + std::to_string(l), x, 1, 1)));
    }
    return outputs;
  }

  // Source image and relative pose (source camera -> target camera) to
  // multi-scale target predictions.
  ForwardResult forward(const Tensor& source_img, std::span<const RigidTransform> s_to_t, const Intrinsics& K) const {
    if (K.width != cfg_.width || K.height != cfg_.height)
      throw ShapeError(detail::cat("forward: intrinsics are for ", K.width, "x", K.height, ", model is ", cfg_.width,
                                   "x", cfg_.height));
    ForwardResult r;
    r.source = encode(source_img);
    r.latent = transform_latent(r.source.latent, s_to_t);
    r.depth = decode_depth(r.latent);
    std::vector<RigidTransform> t_to_s;
    for (const auto& T : s_to_t) t_to_s.push_back(invert(T));
    for (int l : cfg_.skip_levels) r.warped.emplace(l, warp_feature(r.source.pyramid[l], r.depth, K, t_to_s));
    r.predictions = decode_pixels(r.latent, r.warped);
    return r;
  }

  ForwardResult forward(const Tensor& source_img, const RigidTransform& s_to_t, const Intrinsics& K) const {
    return forward(source_img, std::span<const RigidTransform>(&s_to_t, 1), K);
  }

 private:
  void build() {
    std::mt19937_64 rng(cfg_.seed);
    const int L = cfg_.levels();
    const auto& C = cfg_.channels;
    const std::size_t hb = cfg_.level_height(L - 1), wb = cfg_.level_width(L - 1);
    const std::size_t bottleneck = C[L - 1] * hb * wb, nz = 3 * cfg_.latent_points;

    add_conv("enc.conv0", 3, C[0], 3, rng);
    for (int l = 1; l < L; ++l) add_conv("enc.conv" + std::to_string(l), C[l - 1], C[l], 4, rng);
    add_linear("enc.latent", bottleneck, nz, rng);

    add_linear("dep.fc", nz, bottleneck, rng);
    for (int l = L - 2; l >= cfg_.depth_level; --l) add_conv("dep.up" + std::to_string(l), C[l + 1], C[l], 3, rng);
    add_conv("dep.out", C[cfg_.depth_level], 1, 3, rng);

    add_linear("pix.fc", nz, bottleneck, rng);
    for (int l = L - 1; l >= 0; --l) {
      if (l < L - 1) add_conv("pix.up" + std::to_string(l), C[l + 1], C[l], 3, rng);
      add_conv("pix.fuse" + std::to_string(l), cfg_.has_skip(l) ? 2 * C[l] : C[l], C[l], 3, rng);
      if (cfg_.has_output(l)) add_conv("pix.out" + std::to_string(l), C[l], 3, 3, rng);
    }
  }

  // Fan-in scaled uniform init for weights and biases.
  void add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    params_.add(name + ".weight", Tensor::uniform({cout, cin, k, k}, -bound, bound, rng, true));
    params_.add(name + ".bias", Tensor::uniform({cout}, -bound, bound, rng, true));
  }

  void add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    params_.add(name + ".weight", Tensor::uniform({out, in}, -bound, bound, rng, true));
    params_.add(name + ".bias", Tensor::uniform({out}, -bound, bound, rng, true));
  }

  Tensor conv(const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) const {
    return conv2d(x, params_.at(name + ".weight"), params_.at(name + ".bias"), stride, pad);
  }

  Tensor act(const Tensor& x) const { return activation(x, cfg_.act); }

  // Mirrored linear head: [B,n,3] -> bottleneck feature map.
  Tensor from_latent(const std::string& prefix, const Tensor& z) const {
    if (z.rank() != 3 || z.dim(1) != cfg_.latent_points || z.dim(2) != 3)
      throw ShapeError(detail::cat("decoder: expected latent [B,", cfg_.latent_points, ",3], got ",
                                   to_string(z.shape())));
    const std::size_t B = z.dim(0);
    const int L = cfg_.levels();
    Tensor flat = reshape(z, {B, 3 * cfg_.latent_points});
    Tensor h = act(linear(flat, params_.at(prefix + ".fc.weight"), params_.at(prefix + ".fc.bias")));
    return reshape(h, {B, cfg_.channels[L - 1], cfg_.level_height(L - 1), cfg_.level_width(L - 1)});
  }

  ModelConfig cfg_;
  ParamSet params_;
};

// The smallest configuration used for end-to-end gradient checks.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.height = c.width = 8;
  c.channels = {2, 2, 2, 2};
  c.latent_points = 4;
  c.skip_levels = {0, 2, 3};
  c.output_levels = {2, 1, 0};
  c.depth_level = 1;
  c.seed = 3;
  return c;
}

}  // namespace nvs
