#pragma once

// Differentiable bilinear sampling and depth-guided inverse warping of
// feature maps (and images) from the source view into the target view.

#include <cmath>
#include <span>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/ops.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

inline constexpr double kBorderFill = 0.0;

// Samples source [B,C,H,W] at continuous coordinates [B,2,h,w] (pixel-center
// convention). Neighbours outside the source contribute the border fill
// value. Differentiable with respect to both the source values and the
// coordinates.
inline Tensor bilinear_sample(const Tensor& source, const Tensor& coords) {
  detail::require_rank(source, 4, "bilinear_sample source");
  detail::require_rank(coords, 4, "bilinear_sample coords");
  const std::size_t B = source.dim(0), C = source.dim(1), H = source.dim(2), W = source.dim(3);
  if (coords.dim(0) != B || coords.dim(1) != 2)
    throw ShapeError(detail::cat("bilinear_sample: coords ", to_string(coords.shape()), " do not match source ",
                                 to_string(source.shape())));
  const std::size_t h = coords.dim(2), w = coords.dim(3), hw = h * w;

  // Per output pixel: the four taps (flat index or -1) and fractional offsets.
  struct Taps {
    long idx[4];
    double fx, fy;
  };
  std::vector<Taps> taps(B * hw);
  const auto c = coords.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const double x = c[b * 2 * hw + p] - 0.5, y = c[b * 2 * hw + hw + p] - 0.5;
      const double x0 = std::floor(x), y0 = std::floor(y);
      Taps& t = taps[b * hw + p];
      t.fx = x - x0;
      t.fy = y - y0;
      for (int k = 0; k < 4; ++k) {
        const double xi = x0 + (k & 1), yi = y0 + (k >> 1);
        const bool in = xi >= 0 && yi >= 0 && xi < static_cast<double>(W) && yi < static_cast<double>(H);
        t.idx[k] = in ? static_cast<long>(yi) * static_cast<long>(W) + static_cast<long>(xi) : -1;
      }
    }

  std::vector<double> out(B * C * hw);
  const double* src = source.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ch = 0; ch < C; ++ch) {
      const double* s = src + (b * C + ch) * H * W;
      double* o = out.data() + (b * C + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const Taps& t = taps[b * hw + p];
        double v[4];
        for (int k = 0; k < 4; ++k) v[k] = t.idx[k] >= 0 ? s[t.idx[k]] : kBorderFill;
        o[p] = (1 - t.fy) * ((1 - t.fx) * v[0] + t.fx * v[1]) + t.fy * ((1 - t.fx) * v[2] + t.fx * v[3]);
      }
    }

  return detail::make_result("bilinear_sample", {B, C, h, w}, std::move(out), {source, coords},
                             [taps = std::move(taps), B, C, H, W, hw](Node& self) {
    double* gs = detail::input_grad(self, 0);
    double* gc = detail::input_grad(self, 1);
    const double* src = self.inputs[0]->data.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double* go = self.grad.data() + (b * C + ch) * hw;
        const double* s = src + (b * C + ch) * H * W;
        double* g = gs ? gs + (b * C + ch) * H * W : nullptr;
        for (std::size_t p = 0; p < hw; ++p) {
          const Taps& t = taps[b * hw + p];
          const double gv = go[p];
          if (gv == 0.0) continue;
          const double wts[4] = {(1 - t.fy) * (1 - t.fx), (1 - t.fy) * t.fx, t.fy * (1 - t.fx), t.fy * t.fx};
          if (g)
            for (int k = 0; k < 4; ++k)
              if (t.idx[k] >= 0) g[t.idx[k]] += wts[k] * gv;
          if (gc) {
            double v[4];
            for (int k = 0; k < 4; ++k) v[k] = t.idx[k] >= 0 ? s[t.idx[k]] : kBorderFill;
            gc[b * 2 * hw + p] += gv * ((1 - t.fy) * (v[1] - v[0]) + t.fy * (v[3] - v[2]));
            gc[b * 2 * hw + hw + p] += gv * ((1 - t.fx) * (v[2] - v[0]) + t.fx * (v[3] - v[1]));
          }
        }
      }
  });
}

struct WarpedFeature {
  Tensor features;  // [B,C,h,w]; border fill wherever invalid
  Tensor valid;     // [B,1,h,w]
};

namespace detail {

// Multiplies every channel by a constant [B,1,h,w] mask.
inline Tensor apply_mask(const Tensor& x, const Tensor& mask) {
  const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> m(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(mask.data().data() + b * hw, hw, m.data() + (b * C + c) * hw);
  return mul(x, Tensor(x.shape(), std::move(m)));
}

}  // namespace detail

// Warps a source feature map at some pyramid level into the target view.
// `depth_t` may be at any resolution; it is resized to the feature level and
// `K_full` is scaled by the resolution ratio.
inline WarpedFeature warp_feature(const Tensor& source_feat, const Tensor& depth_t, const Intrinsics& K_full,
                                  std::span<const RigidTransform> t_to_s) {
  detail::require_rank(source_feat, 4, "warp_feature source");
  detail::require_rank(depth_t, 4, "warp_feature depth");
  const std::size_t h = source_feat.dim(2), w = source_feat.dim(3);
  if (depth_t.dim(0) != source_feat.dim(0))
    throw ShapeError(detail::cat("warp_feature: batch mismatch ", to_string(source_feat.shape()), " vs depth ",
                                 to_string(depth_t.shape())));
  if (K_full.width * h != K_full.height * w || K_full.width % w != 0)
    throw ShapeError(detail::cat("warp_feature: feature map ", w, "x", h, " is not a pyramid level of ", K_full.width,
                                 "x", K_full.height));
  const Intrinsics K = K_full.scale_to_level(static_cast<double>(w) / static_cast<double>(K_full.width));
  const Tensor depth = resize_bilinear(depth_t, h, w, false);
  const auto field = correspondence_field(depth, K, t_to_s);
  const Tensor sampled = bilinear_sample(source_feat, field.coords);
  return {detail::apply_mask(sampled, field.valid), field.valid};
}

inline WarpedFeature warp_feature(const Tensor& source_feat, const Tensor& depth_t, const Intrinsics& K_full,
                                  const RigidTransform& t_to_s) {
  return warp_feature(source_feat, depth_t, K_full, std::span<const RigidTransform>(&t_to_s, 1));
}

// Pure image-based rendering: the source image warped with a target depth.
inline WarpedFeature warp_image(const Tensor& source_img, const Tensor& depth_t, const Intrinsics& K,
                                std::span<const RigidTransform> t_to_s) {
  if (source_img.rank() != 4 || source_img.dim(1) != 3)
    throw ShapeError(detail::cat("warp_image: expected [B,3,H,W], got ", to_string(source_img.shape())));
  return warp_feature(source_img, depth_t, K, t_to_s);
}

inline WarpedFeature warp_image(const Tensor& source_img, const Tensor& depth_t, const Intrinsics& K,
                                const RigidTransform& t_to_s) {
  return warp_image(source_img, depth_t, K, std::span<const RigidTransform>(&t_to_s, 1));
}

}  // namespace nvs
