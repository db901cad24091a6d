#pragma once

// Image and depth evaluation metrics. Images are [C,H,W] (or [1,C,H,W]) in
// [0,1]; depth maps are flat [H*W] arrays.

#include <cmath>
#include <numeric>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/errors.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

inline double l1_error(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw ShapeError(detail::cat("l1_error: sizes ", pred.size(), " and ", gt.size()));
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::fabs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.size());
}

inline double l1_error(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("l1_error: shape " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  return l1_error(pred.data(), gt.data());
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double dynamic_range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> g(n);
  const double c = (static_cast<double>(n) - 1) / 2;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) - c;
    g[i] = std::exp(-x * x / (2 * sigma * sigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Valid-mode separable filtering of an H x W plane.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W,
                                        const std::vector<double>& g) {
  const std::size_t n = g.size(), ho = H - n + 1, wo = W - n + 1;
  std::vector<double> rows(H * wo), out(ho * wo);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < wo; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += g[k] * img[i * W + j + k];
      rows[i * wo + j] = s;
    }
  for (std::size_t i = 0; i < ho; ++i)
    for (std::size_t j = 0; j < wo; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += g[k] * rows[(i + k) * wo + j];
      out[i * wo + j] = s;
    }
  return out;
}

inline std::vector<double> channel_mean(std::span<const double> chw, std::size_t C, std::size_t hw) {
  std::vector<double> g(hw, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < hw; ++p) g[p] += chw[c * hw + p];
  for (auto& v : g) v /= static_cast<double>(C);
  return g;
}

}  // namespace detail

// Mean SSIM over valid window positions of the channel-mean grayscale images.
inline double ssim(std::span<const double> pred, std::span<const double> gt, std::size_t channels, std::size_t height,
                   std::size_t width, const SsimParams& p = {}) {
  const std::size_t hw = height * width;
  if (pred.size() != gt.size() || pred.size() != channels * hw || channels == 0)
    throw ShapeError(detail::cat("ssim: sizes ", pred.size(), " and ", gt.size(), " for ", channels, "x", height, "x",
                                 width));
  if (height < p.window || width < p.window)
    throw ShapeError(detail::cat("ssim: image ", width, "x", height, " is smaller than the ", p.window, "x", p.window,
                                 " window"));
  const auto g = detail::gaussian_window(p.window, p.sigma);
  const auto x = detail::channel_mean(pred, channels, hw);
  const auto y = detail::channel_mean(gt, channels, hw);
  std::vector<double> xx(hw), yy(hw), xy(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = detail::filter_valid(x, height, width, g), my = detail::filter_valid(y, height, width, g);
  const auto sxx = detail::filter_valid(xx, height, width, g), syy = detail::filter_valid(yy, height, width, g);
  const auto sxy = detail::filter_valid(xy, height, width, g);
  const double c1 = std::pow(p.k1 * p.dynamic_range, 2), c2 = std::pow(p.k2 * p.dynamic_range, 2);
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

// Tensor form; accepts [C,H,W] or [1,C,H,W].
inline double ssim(const Tensor& pred, const Tensor& gt, const SsimParams& p = {}) {
  if (pred.shape() != gt.shape())
    throw ShapeError("ssim: shape " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  const auto& s = pred.shape();
  if (s.size() == 4 && s[0] == 1) return ssim(pred.data(), gt.data(), s[1], s[2], s[3], p);
  if (s.size() == 3) return ssim(pred.data(), gt.data(), s[0], s[1], s[2], p);
  throw ShapeError("ssim: expected [C,H,W] or [1,C,H,W], got " + to_string(s));
}

struct DepthMetrics {
  double l1_all = 0, l1_rel = 0, l1_inv = 0, sc_inv = 0;
};

// Masked depth errors. An empty mask selects every pixel.
inline DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                                  std::span<const std::uint8_t> mask = {}) {
  if (pred.size() != gt.size()) throw ShapeError(detail::cat("depth_metrics: sizes ", pred.size(), " and ", gt.size()));
  if (!mask.empty() && mask.size() != gt.size())
    throw ShapeError(detail::cat("depth_metrics: mask size ", mask.size(), " for ", gt.size(), " pixels"));
  std::size_t n = 0;
  double s_all = 0, s_rel = 0, s_inv = 0;
  std::vector<double> z;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (!(gt[i] > 0)) throw DataError(detail::cat("l1_rel/l1_inv/sc_inv: ground-truth depth ", gt[i], " at pixel ", i));
    if (!(pred[i] > 0)) throw DataError(detail::cat("l1_inv/sc_inv: predicted depth ", pred[i], " at pixel ", i));
    const double d = std::fabs(gt[i] - pred[i]);
    s_all += d;
    s_rel += d / gt[i];
    s_inv += std::fabs(1.0 / gt[i] - 1.0 / pred[i]);
    z.push_back(std::log(pred[i]) - std::log(gt[i]));
    ++n;
  }
  if (n == 0) throw DataError("depth_metrics: mask selects no pixels");
  const double nn = static_cast<double>(n);
  DepthMetrics m{s_all / nn, s_rel / nn, s_inv / nn, 0.0};
  // Two-pass variance: (1/n) sum z^2 - (1/n^2) (sum z)^2 cancels badly when z is near constant.
  const double mean = std::accumulate(z.begin(), z.end(), 0.0) / nn;
  double var = 0;
  for (double v : z) var += (v - mean) * (v - mean);
  m.sc_inv = std::sqrt(var / nn);
  return m;
}

struct MetricReport {
  std::string id;
  double l1 = 0, ssim = 0;
  std::optional<DepthMetrics> depth;
};

inline MetricReport mean_report(const std::vector<MetricReport>& rows) {
  if (rows.empty()) throw std::invalid_argument("mean_report: no rows");
  MetricReport m;
  m.id = "mean";
  std::size_t nd = 0;
  DepthMetrics d;
  for (const auto& r : rows) {
    m.l1 += r.l1;
    m.ssim += r.ssim;
    if (r.depth) {
      d.l1_all += r.depth->l1_all;
      d.l1_rel += r.depth->l1_rel;
      d.l1_inv += r.depth->l1_inv;
      d.sc_inv += r.depth->sc_inv;
      ++nd;
    }
  }
  m.l1 /= static_cast<double>(rows.size());
  m.ssim /= static_cast<double>(rows.size());
  if (nd) {
    const double k = static_cast<double>(nd);
    m.depth = DepthMetrics{d.l1_all / k, d.l1_rel / k, d.l1_inv / k, d.sc_inv / k};
  }
  return m;
}

// CSV with one row per sample and a trailing mean row. Missing depth
// metrics are left empty.
inline std::string metrics_csv(const std::vector<MetricReport>& rows) {
  std::string out = "sample,l1,ssim,l1_all,l1_rel,l1_inv,sc_inv\n";
  auto line = [&out](const MetricReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g", r.id.c_str(), r.l1, r.ssim);
    out += buf;
    if (r.depth) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g\n", r.depth->l1_all, r.depth->l1_rel, r.depth->l1_inv,
                    r.depth->sc_inv);
      out += buf;
    } else {
      out += ",,,,\n";
    }
  };
  for (const auto& r : rows) line(r);
  if (!rows.empty()) line(mean_report(rows));
  return out;
}

}  // namespace nvs
