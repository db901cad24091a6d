#pragma once

// Differentiable primitives used by the networks and losses. All image
// tensors are [batch, channel, height, width], row-major.

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "nvs/tensor.hpp"

namespace nvs {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Eigen chooses its vectorised peeling from operand addresses, so products
// over arbitrary heap buffers can round differently between runs. Products go
// through Eigen-owned (aligned) storage to stay bit-reproducible.
inline RowMat aligned_copy(const double* p, std::size_t rows, std::size_t cols) {
  return CMapMat(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void product_into(double* dst, const RowMat& a, const RowMat& b, bool accumulate) {
  RowMat c;
  c.noalias() = a * b;
  MapMat d(dst, c.rows(), c.cols());
  if (accumulate)
    d += c;
  else
    d = c;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(cat(what, ": expected rank ", rank, " but got shape ", to_string(t.shape())));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(cat(what, ": shape mismatch ", to_string(a.shape()), " vs ", to_string(b.shape())));
}

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
};

inline void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t npix = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * npix;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t npix = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * npix;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [deriv](Node& self) {
    double* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& xin = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gx[i] += self.grad[i] * deriv(xin[i], self.data[i]);
  });
}

}  // namespace detail

// Cross-correlation with square kernels. `bias` may be undefined.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
  using namespace detail;
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin)
    throw ShapeError(cat("conv2d: weight expects ", weight.dim(1), " input channels but input ",
                         to_string(input.shape()), " has ", Cin));
  if (weight.dim(3) != k) throw ShapeError(cat("conv2d: kernel must be square, got ", to_string(weight.shape())));
  if (k < 1 || stride < 1) throw ShapeError("conv2d: kernel size and stride must be >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    throw ShapeError(cat("conv2d: bias shape ", to_string(bias.shape()), " does not match ", Cout, " output channels"));
  if (H + 2 * padding < k || W + 2 * padding < k)
    throw ShapeError(cat("conv2d: kernel ", k, " larger than padded input ", H + 2 * padding, "x", W + 2 * padding));
  if ((H + 2 * padding - k) % stride != 0 || (W + 2 * padding - k) % stride != 0)
    throw ShapeError(cat("conv2d: (H + 2*pad - k) / stride not integral for H=", H, " W=", W, " k=", k,
                         " stride=", stride, " pad=", padding));
  const ConvGeom g{Cin, H, W, k, stride, padding, (H + 2 * padding - k) / stride + 1,
                   (W + 2 * padding - k) / stride + 1};
  const std::size_t K = Cin * k * k, npix = g.ho * g.wo;

  std::vector<double> out(B * Cout * npix);
  RowMat cols(K, npix);
  const RowMat Wm = aligned_copy(weight.data().data(), Cout, K);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(input.data().data() + b * Cin * H * W, g, cols.data());
    product_into(out.data() + b * Cout * npix, Wm, cols, false);
    MapMat O(out.data() + b * Cout * npix, Cout, npix);
    if (bias.defined())
      for (std::size_t o = 0; o < Cout; ++o) O.row(o).array() += bias[o];
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("conv2d", {B, Cout, g.ho, g.wo}, std::move(out), std::move(inputs),
                     [g, B, Cout, K, npix](Node& self) {
    double* gx = input_grad(self, 0);
    double* gw = input_grad(self, 1);
    double* gb = self.inputs.size() > 2 ? input_grad(self, 2) : nullptr;
    const Node& xin = *self.inputs[0];
    const Node& win = *self.inputs[1];
    RowMat cols(K, npix);
    const RowMat WmT = aligned_copy(win.data.data(), Cout, K).transpose();
    for (std::size_t b = 0; b < B; ++b) {
      const RowMat dO = aligned_copy(self.grad.data() + b * Cout * npix, Cout, npix);
      if (gb)
        for (std::size_t o = 0; o < Cout; ++o) gb[o] += dO.row(o).sum();
      if (gw) {
        im2col(xin.data.data() + b * g.cin * g.h * g.w, g, cols.data());
        product_into(gw, dO, cols.transpose(), true);
      }
      if (gx) {
        product_into(cols.data(), WmT, dO, false);
        col2im_add(cols.data(), g, gx + b * g.cin * g.h * g.w);
      }
    }
  });
}

// y = x W^T + b for x [B,N], W [M,N], b [M].
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  using namespace detail;
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t B = input.dim(0), N = input.dim(1), M = weight.dim(0);
  if (weight.dim(1) != N)
    throw ShapeError(cat("linear: input ", to_string(input.shape()), " incompatible with weight ",
                         to_string(weight.shape())));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != M))
    throw ShapeError(cat("linear: bias shape ", to_string(bias.shape()), " does not match ", M, " outputs"));
  std::vector<double> out(B * M);
  product_into(out.data(), aligned_copy(input.data().data(), B, N),
               aligned_copy(weight.data().data(), M, N).transpose(), false);
  MapMat Y(out.data(), B, M);
  if (bias.defined())
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < M; ++j) Y(i, j) += bias[j];
  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("linear", {B, M}, std::move(out), std::move(inputs), [B, N, M](Node& self) {
    const RowMat dY = aligned_copy(self.grad.data(), B, M);
    if (double* gx = input_grad(self, 0))
      product_into(gx, dY, aligned_copy(self.inputs[1]->data.data(), M, N), true);
    if (double* gw = input_grad(self, 1))
      product_into(gw, dY.transpose(), aligned_copy(self.inputs[0]->data.data(), B, N), true);
    if (self.inputs.size() > 2)
      if (double* gb = input_grad(self, 2))
        for (std::size_t j = 0; j < M; ++j) gb[j] += dY.col(j).sum();
  });
}

enum class Activation { relu, leaky_relu, elu, sigmoid, tanh, identity };

inline Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "leaky_relu") return Activation::leaky_relu;
  if (name == "elu") return Activation::elu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::elu: return "elu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double alpha) {
  if (!(alpha > 0)) throw std::invalid_argument("leaky_relu: alpha must be > 0");
  return detail::unary("leaky_relu", x, [alpha](double v) { return v > 0 ? v : alpha * v; },
                       [alpha](double v, double) { return v > 0 ? 1.0 : alpha; });
}

inline Tensor elu(const Tensor& x) {
  return detail::unary("elu", x, [](double v) { return v > 0 ? v : std::expm1(v); },
                       [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor activation(const Tensor& x, Activation kind, double alpha = 0.2) {
  switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, alpha);
    case Activation::elu: return elu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::identity: return x;
  }
  return x;
}

inline Tensor abs(const Tensor& x) {
  return detail::unary("abs", x, [](double v) { return std::fabs(v); },
                       [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor reciprocal(const Tensor& x) {
  return detail::unary("reciprocal", x, [](double v) { return 1.0 / v; },
                       [](double, double y) { return -y * y; });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

namespace detail {

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  return make_result(op, a.shape(), std::move(out), {a, b}, [da, db](Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (double* ga = input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * da(x[i], y[i]);
    if (double* gb = input_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * db(x[i], y[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary("add", a, b, [](double x, double y) { return x + y; },
                        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary("sub", a, b, [](double x, double y) { return x - y; },
                        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary("mul", a, b, [](double x, double y) { return x * y; },
                        [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor sum(const Tensor& x) {
  const auto d = x.data();
  double s = 0.0;
  for (double v : d) s += v;
  return detail::make_result("sum", {1}, {s}, {x}, [](Node& self) {
    if (double* g = detail::input_grad(self, 0)) {
      const double go = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += go;
    }
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean absolute difference, the L1 building block of every loss.
inline Tensor mean_abs_diff(const Tensor& a, const Tensor& b) { return mean(abs(sub(a, b))); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError(detail::cat("reshape: cannot view ", to_string(x.shape()), " as ", to_string(shape)));
  return detail::make_result("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                             {x}, [](Node& self) {
    if (double* g = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// Stacks b after a along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  using namespace detail;
  require_rank(a, 4, "concat_channels a");
  require_rank(b, 4, "concat_channels b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError(cat("concat_channels: batch/spatial mismatch ", to_string(a.shape()), " vs ",
                         to_string(b.shape())));
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(B * (Ca + Cb) * hw);
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.data().data() + n * Ca * hw, Ca * hw, out.data() + n * (Ca + Cb) * hw);
    std::copy_n(b.data().data() + n * Cb * hw, Cb * hw, out.data() + n * (Ca + Cb) * hw + Ca * hw);
  }
  return make_result("concat_channels", {B, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                     [B, Ca, Cb, hw](Node& self) {
    const double* go = self.grad.data();
    if (double* ga = input_grad(self, 0))
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < Ca * hw; ++i) ga[n * Ca * hw + i] += go[n * (Ca + Cb) * hw + i];
    if (double* gb = input_grad(self, 1))
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < Cb * hw; ++i) gb[n * Cb * hw + i] += go[n * (Ca + Cb) * hw + Ca * hw + i];
  });
}

namespace detail {

struct Interp1d {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

// Source positions for each output index. align_corners=false follows the
// pixel-center convention: out pixel j covers [j, j+1) scaled to the input.
inline Interp1d interp_table(std::size_t in, std::size_t out, bool align_corners) {
  Interp1d t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  for (std::size_t j = 0; j < out; ++j) {
    double src;
    if (align_corners)
      src = out > 1 ? static_cast<double>(j) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    else
      src = std::max(0.0, (static_cast<double>(j) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5);
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    t.i0[j] = lo;
    t.i1[j] = hi;
    t.w1[j] = hi == lo ? 0.0 : src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

inline Tensor resize_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w, bool align_corners) {
  using namespace detail;
  require_rank(input, 4, "resize_bilinear input");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output size must be >= 1");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H == out_h && W == out_w) return input;
  auto ty = interp_table(H, out_h, align_corners);
  auto tx = interp_table(W, out_w, align_corners);
  std::vector<double> out(B * C * out_h * out_w);
  const double* in = input.data().data();
  for (std::size_t p = 0; p < B * C; ++p) {
    const double* src = in + p * H * W;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const double wy = ty.w1[i];
      const double* r0 = src + ty.i0[i] * W;
      const double* r1 = src + ty.i1[i] * W;
      for (std::size_t j = 0; j < out_w; ++j) {
        const double wx = tx.w1[j];
        const double top = (1 - wx) * r0[tx.i0[j]] + wx * r0[tx.i1[j]];
        const double bot = (1 - wx) * r1[tx.i0[j]] + wx * r1[tx.i1[j]];
        dst[i * out_w + j] = (1 - wy) * top + wy * bot;
      }
    }
  }
  return make_result("resize_bilinear", {B, C, out_h, out_w}, std::move(out), {input},
                     [ty, tx, B, C, H, W, out_h, out_w](Node& self) {
    double* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t p = 0; p < B * C; ++p) {
      const double* go = self.grad.data() + p * out_h * out_w;
      double* gi = g + p * H * W;
      for (std::size_t i = 0; i < out_h; ++i) {
        const double wy = ty.w1[i];
        double* r0 = gi + ty.i0[i] * W;
        double* r1 = gi + ty.i1[i] * W;
        for (std::size_t j = 0; j < out_w; ++j) {
          const double v = go[i * out_w + j];
          const double wx = tx.w1[j];
          r0[tx.i0[j]] += (1 - wy) * (1 - wx) * v;
          r0[tx.i1[j]] += (1 - wy) * wx * v;
          r1[tx.i0[j]] += wy * (1 - wx) * v;
          r1[tx.i1[j]] += wy * wx * v;
        }
      }
    }
  });
}

}  // namespace nvs
