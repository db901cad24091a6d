// Renders one procedural scene from two orbit cameras, then re-synthesizes
// the second view from the first using its ground-truth depth.
//
//   warp_demo [out_dir] [seed]

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "nvs/nvs.hpp"

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "warp_demo_out";
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;
  std::filesystem::create_directories(out);

  const nvs::Scene scene = nvs::random_scene(seed);
  const nvs::Intrinsics K = nvs::default_intrinsics(64, 64);
  const auto src_pose = nvs::pose_from_orbit(0, 10, 4.0);
  const auto tgt_pose = nvs::pose_from_orbit(30, 20, 4.0);
  const auto src = nvs::render_view(scene, src_pose, K);
  const auto tgt = nvs::render_view(scene, tgt_pose, K);

  const auto t_to_s = nvs::relative_pose(tgt_pose, src_pose);
  const nvs::Tensor src_img({1, 3, 64, 64}, src.image);
  const nvs::Tensor tgt_depth({1, 1, 64, 64}, tgt.depth);
  const auto warped = nvs::warp_image(src_img, tgt_depth, K, t_to_s);

  const auto vis = nvs::visibility_mask(src, tgt, K, t_to_s);
  const std::size_t hw = 64 * 64;
  double err = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    if (!vis[p]) continue;
    for (std::size_t c = 0; c < 3; ++c) err += std::abs(warped.features[c * hw + p] - tgt.image[c * hw + p]);
    n += 3;
  }
  std::printf("visible pixels %zu, L1 on visible pixels %.5f (%.2f / 255)\n", n / 3, err / n, 255 * err / n);

  nvs::write_png(out / "source.png", nvs::to_raster8(src.image, 3, 64, 64));
  nvs::write_png(out / "target.png", nvs::to_raster8(tgt.image, 3, 64, 64));
  nvs::write_png(out / "warped.png", nvs::to_raster8(warped.features.data(), 3, 64, 64));
  std::printf("images written to %s\n", out.c_str());
}
