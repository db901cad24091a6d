#pragma once

// Pinhole cameras, rigid transforms and the two places where pose enters the
// pipeline: the latent point transformation and the target-to-source pixel
// correspondence field.
//
// Conventions (used everywhere, including the renderer):
//  * camera frame: x right, y down, z forward;
//  * pixel (row i, col j) has continuous coordinates (j + 0.5, i + 0.5), so
//    an image of width W spans [0, W] horizontally;
//  * world frame is y-up; orbit cameras look at the origin.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "nvs/ops.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kBehindCameraEps = 1e-6;

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  std::size_t width = 1, height = 1;

  void validate() const {
    if (!(fx > 0 && fy > 0))
      throw std::invalid_argument(detail::cat("intrinsics: focal lengths must be positive (fx=", fx, ", fy=", fy, ")"));
    if (!(cx >= 0 && cx < static_cast<double>(width) && cy >= 0 && cy < static_cast<double>(height)))
      throw std::invalid_argument(detail::cat("intrinsics: principal point (", cx, ", ", cy,
                                              ") outside image ", width, "x", height));
  }

  // Uniform rescale for a resized image; sizes must stay integral.
  Intrinsics scale_to_level(double s) const {
    const double w = static_cast<double>(width) * s, h = static_cast<double>(height) * s;
    if (w != std::round(w) || h != std::round(h) || w < 1 || h < 1)
      throw ShapeError(detail::cat("intrinsics: scale ", s, " of ", width, "x", height, " is not integral"));
    return {fx * s, fy * s, cx * s, cy * s, static_cast<std::size_t>(w), static_cast<std::size_t>(h)};
  }

  // Intrinsics for a pyramid level with resolution divided by 2^level.
  Intrinsics at_level(int level) const { return scale_to_level(std::ldexp(1.0, -level)); }

  Mat3 matrix() const {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return K;
  }

  Vec2 project(const Vec3& p) const { return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy}; }

  // Point at camera-space depth z along the ray through continuous pixel p.
  Vec3 backproject(const Vec2& p, double z) const {
    return {(p.x() - cx) / fx * z, (p.y() - cy) / fy * z, z};
  }

  bool operator==(const Intrinsics&) const = default;
};

// Camera used for generated data: horizontal field of view of about 49.5 degrees.
inline Intrinsics default_intrinsics(std::size_t width, std::size_t height) {
  const double f = 1.1 * static_cast<double>(width);
  return {f, f, static_cast<double>(width) / 2.0, static_cast<double>(height) / 2.0, width, height};
}

// Proper rigid motion p -> R p + t.
class RigidTransform {
 public:
  RigidTransform() : R_(Mat3::Identity()), t_(Vec3::Zero()) {}

  RigidTransform(const Mat3& R, const Vec3& t) : R_(R), t_(t) {
    const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
    const double det = R.determinant();
    if (!(ortho <= 1e-9) || !(std::fabs(det - 1.0) <= 1e-9) || !t.allFinite())
      throw std::invalid_argument(detail::cat("rigid transform: rotation not orthonormal (|R^T R - I|=", ortho,
                                              ", det=", det, ")"));
  }

  static RigidTransform identity() { return {}; }
  static RigidTransform translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  // From 12 values: rotation row-major then translation.
  static RigidTransform from_values(std::span<const double> v) {
    if (v.size() != 12) throw std::invalid_argument(detail::cat("rigid transform needs 12 values, got ", v.size()));
    Mat3 R;
    R << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
    return {R, Vec3(v[9], v[10], v[11])};
  }

  std::array<double, 12> values() const {
    return {R_(0, 0), R_(0, 1), R_(0, 2), R_(1, 0), R_(1, 1), R_(1, 2),
            R_(2, 0), R_(2, 1), R_(2, 2), t_.x(), t_.y(), t_.z()};
  }

  const Mat3& rotation() const { return R_; }
  const Vec3& translation() const { return t_; }

  Vec3 apply(const Vec3& p) const { return R_ * p + t_; }

  // Exactly the identity, bit for bit.
  bool is_identity() const { return R_ == Mat3::Identity() && t_ == Vec3::Zero(); }

  // Rotation angle in radians.
  double angle() const {
    const double c = std::clamp((R_.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
  }

 private:
  Mat3 R_;
  Vec3 t_;
};

// compose(a, b) applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation()};
}

inline RigidTransform invert(const RigidTransform& T) {
  const Mat3 Rt = T.rotation().transpose();
  return {Rt, -Rt * T.translation()};
}

// Relative transform mapping points in camera `from` to camera `to`, given
// world-to-camera poses of both.
inline RigidTransform relative_pose(const RigidTransform& world_to_from, const RigidTransform& world_to_to) {
  return compose(world_to_to, invert(world_to_from));
}

// World-to-camera pose for a camera at `eye` looking at `target`, world up +y.
inline RigidTransform look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 up(0, 1, 0);
  Vec3 forward = target - eye;
  if (forward.norm() < 1e-12) throw std::invalid_argument("look_at: camera coincides with its target");
  forward.normalize();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) throw std::invalid_argument("look_at: view direction parallel to the up vector");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Mat3 R;
  R.row(0) = right.transpose();
  R.row(1) = down.transpose();
  R.row(2) = forward.transpose();
  return {R, -R * eye};
}

// Camera centre for azimuth/elevation (degrees) on a sphere of `radius`:
// azimuth 0, elevation 0 sits at (0, 0, -radius) looking along +z.
inline Vec3 orbit_center(double azimuth_deg, double elevation_deg, double radius) {
  const double az = azimuth_deg * std::numbers::pi / 180.0, el = elevation_deg * std::numbers::pi / 180.0;
  return radius * Vec3(std::cos(el) * std::sin(az), std::sin(el), -std::cos(el) * std::cos(az));
}

inline RigidTransform pose_from_orbit(double azimuth_deg, double elevation_deg, double radius) {
  if (!(radius > 0)) throw std::invalid_argument(detail::cat("orbit radius must be positive, got ", radius));
  if (std::fabs(std::cos(elevation_deg * std::numbers::pi / 180.0)) < 1e-9)
    throw std::invalid_argument(detail::cat("orbit elevation ", elevation_deg, " degenerates the up vector"));
  return look_at(orbit_center(azimuth_deg, elevation_deg, radius), Vec3::Zero());
}

// Maps a continuous target pixel with depth to continuous source coordinates.
inline Vec2 reproject_point(const Intrinsics& K, const RigidTransform& t_to_s, const Vec2& p, double depth) {
  return K.project(t_to_s.apply(K.backproject(p, depth)));
}

namespace detail {

inline const RigidTransform& pick(std::span<const RigidTransform> poses, std::size_t b, std::size_t batch) {
  if (poses.size() != 1 && poses.size() != batch)
    throw ShapeError(cat("expected 1 or ", batch, " transforms, got ", poses.size()));
  return poses.size() == 1 ? poses[0] : poses[b];
}

}  // namespace detail

// Latent points z [B, n, 3] mapped through per-sample rigid transforms.
// Differentiable with respect to z; the transforms are data.
inline Tensor transform_latent(const Tensor& z, std::span<const RigidTransform> poses) {
  detail::require_rank(z, 3, "transform_latent");
  if (z.dim(2) != 3) throw ShapeError(detail::cat("transform_latent: last dim must be 3, got ", to_string(z.shape())));
  const std::size_t B = z.dim(0), n = z.dim(1);
  std::vector<Mat3> Rs;
  std::vector<double> out(z.numel());
  for (std::size_t b = 0; b < B; ++b) {
    const auto& T = detail::pick(poses, b, B);
    Rs.push_back(T.rotation());
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = z.data().data() + (b * n + i) * 3;
      const Vec3 q = T.apply(Vec3(p[0], p[1], p[2]));
      std::copy(q.data(), q.data() + 3, out.data() + (b * n + i) * 3);
    }
  }
  return detail::make_result("transform_latent", z.shape(), std::move(out), {z}, [Rs, B, n](Node& self) {
    double* g = detail::input_grad(self, 0);
    if (!g) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const double* go = self.grad.data() + (b * n + i) * 3;
        const Vec3 gi = Rs[b].transpose() * Vec3(go[0], go[1], go[2]);
        for (int k = 0; k < 3; ++k) g[(b * n + i) * 3 + k] += gi[k];
      }
  });
}

inline Tensor transform_latent(const Tensor& z, const RigidTransform& pose) {
  return transform_latent(z, std::span<const RigidTransform>(&pose, 1));
}

struct CorrespondenceField {
  Tensor coords;  // [B, 2, H, W] continuous source (x, y)
  Tensor valid;   // [B, 1, H, W] 1 or 0
};

// For every target pixel: back-project with depth_t, move into the source
// camera and project. Differentiable with respect to depth.
inline CorrespondenceField correspondence_field(const Tensor& depth_t, const Intrinsics& K,
                                                std::span<const RigidTransform> t_to_s) {
  detail::require_rank(depth_t, 4, "correspondence_field depth");
  const std::size_t B = depth_t.dim(0), H = depth_t.dim(2), W = depth_t.dim(3);
  if (depth_t.dim(1) != 1) throw ShapeError("correspondence_field: depth must have one channel");
  if (K.width != W || K.height != H)
    throw ShapeError(detail::cat("correspondence_field: intrinsics are for ", K.width, "x", K.height,
                                 " but depth is ", W, "x", H));
  const std::size_t hw = H * W;
  std::vector<double> coords(B * 2 * hw), valid(B * hw), du(B * hw, 0.0), dv(B * hw, 0.0);
  const auto d = depth_t.data();
  const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& T = detail::pick(t_to_s, b, B);
    const bool ident = T.is_identity();
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t p = i * W + j, bp = b * hw + p;
        double* cx = coords.data() + b * 2 * hw + p;
        double* cy = cx + hw;
        const double px = static_cast<double>(j) + 0.5, py = static_cast<double>(i) + 0.5;
        const double depth = d[bp];
        if (!(depth > 0)) {
          *cx = *cy = -2.0;
          valid[bp] = 0.0;
          continue;
        }
        if (ident) {
          *cx = px;
          *cy = py;
          valid[bp] = 1.0;
          continue;
        }
        const Vec3 a = T.rotation() * Vec3((px - K.cx) / K.fx, (py - K.cy) / K.fy, 1.0);
        const Vec3 Y = depth * a + T.translation();
        if (Y.z() <= kBehindCameraEps) {
          *cx = *cy = -2.0;
          valid[bp] = 0.0;
          continue;
        }
        const double u = K.fx * Y.x() / Y.z() + K.cx, v = K.fy * Y.y() / Y.z() + K.cy;
        *cx = u;
        *cy = v;
        valid[bp] = (u >= -1.0 && u <= Wd + 1.0 && v >= -1.0 && v <= Hd + 1.0) ? 1.0 : 0.0;
        const double iz2 = 1.0 / (Y.z() * Y.z());
        du[bp] = K.fx * (a.x() * Y.z() - Y.x() * a.z()) * iz2;
        dv[bp] = K.fy * (a.y() * Y.z() - Y.y() * a.z()) * iz2;
      }
  }
  Tensor coords_t = detail::make_result("correspondence_field", {B, 2, H, W}, std::move(coords), {depth_t},
                                        [du = std::move(du), dv = std::move(dv), B, hw](Node& self) {
    double* g = detail::input_grad(self, 0);
    if (!g) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < hw; ++p)
        g[b * hw + p] += self.grad[b * 2 * hw + p] * du[b * hw + p] + self.grad[b * 2 * hw + hw + p] * dv[b * hw + p];
  });
  return {coords_t, Tensor({B, 1, H, W}, std::move(valid))};
}

inline CorrespondenceField correspondence_field(const Tensor& depth_t, const Intrinsics& K, const RigidTransform& t_to_s) {
  return correspondence_field(depth_t, K, std::span<const RigidTransform>(&t_to_s, 1));
}

}  // namespace nvs
