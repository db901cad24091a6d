// A few optimisation steps of the full objective on a single rendered pair,
// using a reduced 32x32 model so it finishes in seconds.

#include <cstdio>

#include "nvs/nvs.hpp"

int main() {
  nvs::ModelConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.channels = {8, 16, 16, 32, 32};
  cfg.latent_points = 32;
  nvs::Model model(cfg);

  const nvs::Scene scene = nvs::random_scene(3);
  const nvs::Intrinsics K = nvs::default_intrinsics(32, 32);
  const auto ps = nvs::pose_from_orbit(0, 10, 4.0), pt = nvs::pose_from_orbit(20, 10, 4.0);
  nvs::Batch batch;
  batch.source = nvs::Tensor({1, 3, 32, 32}, nvs::render_view(scene, ps, K).image);
  batch.target = nvs::Tensor({1, 3, 32, 32}, nvs::render_view(scene, pt, K).image);
  batch.s_to_t = {nvs::relative_pose(ps, pt)};
  batch.K = K;

  const nvs::LossWeights w;
  const auto extractor = nvs::PerceptualExtractor::random();
  auto adam = nvs::make_adam(model.params(), 1e-3);
  std::printf("%zu parameters\n", model.params().total_elements());
  for (int step = 1; step <= 20; ++step) {
    model.params().zero_grad();
    const auto parts = nvs::compute_losses(model, batch, w, extractor);
    const auto total = nvs::total_loss(parts, w);
    nvs::backward(total);
    nvs::adam_step(model.params(), adam);
    std::printf("step %2d  total %.5f  reco %.5f  vgg %.5f  depth %.6f  edge %.6f\n", step, total.item(),
                parts.reconstruction.item(), parts.perceptual.item(), parts.depth.item(), parts.edge.item());
  }
}
