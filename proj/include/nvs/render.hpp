#pragma once

// Procedural scenes (textured axis-aligned cuboids on a ground square) and a
// z-buffered triangle rasterizer producing RGB, camera-space depth and a
// per-pixel face id. Textures are solid functions of world position and the
// shading is view independent, so corresponding pixels in two views share
// the same colour.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "nvs/geometry.hpp"

namespace nvs {

enum class TextureKind { stripes, checker, noise };

struct Texture {
  TextureKind kind = TextureKind::stripes;
  Vec3 color_a{0.2, 0.2, 0.2};
  Vec3 color_b{0.8, 0.8, 0.8};
  double period = 1.0;
  // Stripes use waves[0]; noise sums all three.
  std::array<Vec3, 3> waves{Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  std::array<double, 3> phases{0, 0, 0};

  // Blend factor in [0,1] at world point p on a face with in-plane axes u, v.
  double blend(const Vec3& p, int u_axis, int v_axis) const {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    switch (kind) {
      case TextureKind::stripes:
        return 0.5 + 0.5 * std::sin(two_pi * waves[0].dot(p) / period + phases[0]);
      case TextureKind::checker:
        return 0.5 + 0.5 * std::sin(two_pi * p[u_axis] / period + phases[0]) *
                         std::sin(two_pi * p[v_axis] / period + phases[1]);
      case TextureKind::noise: {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += std::sin(two_pi * waves[k].dot(p) / (period * (1.0 + 0.37 * k)) + phases[k]);
        return 0.5 + s / 6.0;
      }
    }
    return 0.5;
  }

  Vec3 color(const Vec3& p, int u_axis, int v_axis) const {
    const double t = blend(p, u_axis, v_axis);
    return (1 - t) * color_a + t * color_b;
  }
};

struct Cuboid {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();
  Texture texture;
};

// Horizontal square at height y, centred on the origin.
struct GroundSquare {
  double y = -0.6;
  double half_extent = 1.2;
  Texture texture;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<Cuboid> boxes;
  std::optional<GroundSquare> ground;
  Vec3 background{0.9, 0.9, 0.9};
  double far_depth = 9.0;
};

// Planar rectangular face: corner + two edge vectors, outward normal.
struct Face {
  Vec3 origin, edge_u, edge_v, normal;
  int u_axis, v_axis;
  const Texture* texture;
};

inline const Vec3& light_direction() {
  static const Vec3 l = Vec3(0.4, 1.0, -0.3).normalized();
  return l;
}

inline double shade_factor(const Vec3& normal) { return 0.55 + 0.45 * std::max(0.0, normal.dot(light_direction())); }

inline std::vector<Face> scene_faces(const Scene& scene) {
  std::vector<Face> faces;
  for (const auto& box : scene.boxes) {
    const Vec3 lo = box.center - box.size / 2, hi = box.center + box.size / 2;
    for (int axis = 0; axis < 3; ++axis) {
      const int a = (axis + 1) % 3, b = (axis + 2) % 3;
      for (int side = 0; side < 2; ++side) {
        Vec3 origin = lo;
        origin[axis] = side ? hi[axis] : lo[axis];
        Vec3 eu = Vec3::Zero(), ev = Vec3::Zero(), n = Vec3::Zero();
        eu[a] = box.size[a];
        ev[b] = box.size[b];
        n[axis] = side ? 1.0 : -1.0;
        faces.push_back({origin, eu, ev, n, a, b, &box.texture});
      }
    }
  }
  if (scene.ground) {
    const auto& g = *scene.ground;
    faces.push_back({Vec3(-g.half_extent, g.y, -g.half_extent), Vec3(2 * g.half_extent, 0, 0),
                     Vec3(0, 0, 2 * g.half_extent), Vec3(0, 1, 0), 0, 2, &g.texture});
  }
  return faces;
}

inline Vec3 face_color(const Face& f, const Vec3& world) {
  return shade_factor(f.normal) * f.texture->color(world, f.u_axis, f.v_axis);
}

struct RenderOutput {
  std::size_t width = 0, height = 0;
  std::vector<double> image;   // [3,H,W] in [0,1]
  std::vector<double> depth;   // [H,W] camera-space z; far_depth on background
  std::vector<int> face_id;    // [H,W]; -1 on background
};

// Z-buffered rasterization. Depth is exact for planar faces: 1/z is affine in
// screen space, so interpolating it with screen barycentrics reproduces the
// ray/plane intersection at every pixel centre.
inline RenderOutput render_view(const Scene& scene, const RigidTransform& world_to_cam, const Intrinsics& K) {
  const std::size_t W = K.width, H = K.height, hw = W * H;
  RenderOutput out{W, H, std::vector<double>(3 * hw), std::vector<double>(hw, scene.far_depth),
                   std::vector<int>(hw, -1)};
  std::vector<double> zbuf(hw, std::numeric_limits<double>::infinity());
  const auto faces = scene_faces(scene);

  for (std::size_t fi = 0; fi < faces.size(); ++fi) {
    const Face& f = faces[fi];
    const Vec3 corners[4] = {f.origin, f.origin + f.edge_u, f.origin + f.edge_u + f.edge_v, f.origin + f.edge_v};
    Vec3 cam[4];
    bool behind = false;
    for (int k = 0; k < 4; ++k) {
      cam[k] = world_to_cam.apply(corners[k]);
      behind |= cam[k].z() <= kBehindCameraEps;
    }
    // Geometry is generated inside the depth range, so no near-plane clipping.
    if (behind) continue;
    Vec2 scr[4];
    for (int k = 0; k < 4; ++k) scr[k] = K.project(cam[k]);
    const int tris[2][3] = {{0, 1, 2}, {0, 2, 3}};
    for (const auto& tri : tris) {
      const Vec2 &a = scr[tri[0]], &b = scr[tri[1]], &c = scr[tri[2]];
      const double area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
      if (std::fabs(area) < 1e-12) continue;
      const double inv_z[3] = {1.0 / cam[tri[0]].z(), 1.0 / cam[tri[1]].z(), 1.0 / cam[tri[2]].z()};
      const double minx = std::min({a.x(), b.x(), c.x()}), maxx = std::max({a.x(), b.x(), c.x()});
      const double miny = std::min({a.y(), b.y(), c.y()}), maxy = std::max({a.y(), b.y(), c.y()});
      const long j0 = std::max(0L, static_cast<long>(std::floor(minx - 0.5)));
      const long j1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(maxx - 0.5)));
      const long i0 = std::max(0L, static_cast<long>(std::floor(miny - 0.5)));
      const long i1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(maxy - 0.5)));
      for (long i = i0; i <= i1; ++i)
        for (long j = j0; j <= j1; ++j) {
          const double px = static_cast<double>(j) + 0.5, py = static_cast<double>(i) + 0.5;
          double w0 = (b.x() - px) * (c.y() - py) - (b.y() - py) * (c.x() - px);
          double w1 = (c.x() - px) * (a.y() - py) - (c.y() - py) * (a.x() - px);
          double w2 = (a.x() - px) * (b.y() - py) - (a.y() - py) * (b.x() - px);
          w0 /= area;
          w1 /= area;
          w2 /= area;
          if (w0 < 0 || w1 < 0 || w2 < 0) continue;
          const double z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
          const std::size_t p = static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j);
          if (z >= zbuf[p]) continue;
          zbuf[p] = z;
          out.depth[p] = z;
          out.face_id[p] = static_cast<int>(fi);
        }
    }
  }

  const RigidTransform cam_to_world = invert(world_to_cam);
  for (std::size_t p = 0; p < hw; ++p) {
    Vec3 color = scene.background;
    if (out.face_id[p] >= 0) {
      const Vec2 px(static_cast<double>(p % W) + 0.5, static_cast<double>(p / W) + 0.5);
      const Vec3 world = cam_to_world.apply(K.backproject(px, out.depth[p]));
      color = face_color(faces[static_cast<std::size_t>(out.face_id[p])], world);
    }
    for (int c = 0; c < 3; ++c) out.image[c * hw + p] = std::clamp(color[c], 0.0, 1.0);
  }
  return out;
}

namespace detail {

inline Texture random_texture(std::mt19937_64& rng, double min_period, double max_period) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto rcolor = [&] { return Vec3(0.15 + 0.75 * u01(rng), 0.15 + 0.75 * u01(rng), 0.15 + 0.75 * u01(rng)); };
  auto rdir = [&] {
    std::normal_distribution<double> n01(0.0, 1.0);
    Vec3 d(n01(rng), n01(rng), n01(rng));
    return d.normalized();
  };
  Texture t;
  t.kind = static_cast<TextureKind>(std::min<int>(2, static_cast<int>(u01(rng) * 3)));
  t.color_a = rcolor();
  t.color_b = rcolor();
  t.period = min_period + (max_period - min_period) * u01(rng);
  for (auto& w : t.waves) w = rdir();
  for (auto& ph : t.phases) ph = 2 * std::numbers::pi * u01(rng);
  return t;
}

}  // namespace detail

// 2-4 boxes resting on a ground square, everything within 1.8 units of the
// origin so every orbit camera at radius 4 sees depths in [2.2, 5.8].
inline Scene random_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Scene s;
  s.seed = seed;
  GroundSquare g;
  g.texture = detail::random_texture(rng, 2.4, 3.6);
  s.ground = g;
  const int count = 2 + static_cast<int>(u01(rng) * 3);
  for (int k = 0; k < count; ++k) {
    Cuboid b;
    b.size = Vec3(0.3 + 0.5 * u01(rng), 0.3 + 0.6 * u01(rng), 0.3 + 0.5 * u01(rng));
    b.center = Vec3(-0.55 + 1.1 * u01(rng), g.y + b.size.y() / 2, -0.55 + 1.1 * u01(rng));
    b.texture = detail::random_texture(rng, 1.05, 1.95);
    s.boxes.push_back(b);
  }
  return s;
}

}  // namespace nvs
