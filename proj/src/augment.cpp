#include "segguide/augment.hpp"

#include <cmath>

namespace segguide {

namespace F = torch::nn::functional;

AugmentationConfig AugmentationConfig::disabled() {
  AugmentationConfig c;
  c.flip_prob = 0.0;
  c.rot90_prob = 0.0;
  c.elastic_prob = 0.0;
  c.intensity_scale_range = {1.0, 1.0};
  c.brightness_shift_range = {0.0, 0.0};
  c.noise_sigma = 0.0;
  c.blur_prob = 0.0;
  c.channel_dropout_prob = 0.0;
  return c;
}

void AugmentationConfig::validate() const {
  for (double p : {flip_prob, rot90_prob, elastic_prob, blur_prob, channel_dropout_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("augmentation probabilities must lie in [0, 1]");
  }
  for (const auto& r : {intensity_scale_range, brightness_shift_range, blur_sigma_range}) {
    if (r.first > r.second) throw ValidationError("augmentation range is not ordered");
  }
  if (noise_sigma < 0.0 || elastic_sigma_vox < 0.0) throw ValidationError("sigmas must be nonnegative");
  if (elastic_control_points < 2) throw ValidationError("elastic grid needs >= 2 control points per axis");
  if (blur_sigma_range.first <= 0.0 && blur_prob > 0.0) throw ValidationError("blur sigma must be positive");
}

void to_json(nlohmann::json& j, const AugmentationConfig& c) {
  j = {{"flip_prob", c.flip_prob},
       {"rot90_prob", c.rot90_prob},
       {"elastic_prob", c.elastic_prob},
       {"elastic_control_points", c.elastic_control_points},
       {"elastic_sigma_vox", c.elastic_sigma_vox},
       {"intensity_scale_range", {c.intensity_scale_range.first, c.intensity_scale_range.second}},
       {"brightness_shift_range", {c.brightness_shift_range.first, c.brightness_shift_range.second}},
       {"noise_sigma", c.noise_sigma},
       {"blur_prob", c.blur_prob},
       {"blur_sigma_range", {c.blur_sigma_range.first, c.blur_sigma_range.second}},
       {"channel_dropout_prob", c.channel_dropout_prob},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AugmentationConfig& c) {
  AugmentationConfig d;
  auto range = [&](const char* key, std::pair<double, double> fallback) {
    if (!j.contains(key)) return fallback;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 2) throw ValidationError(std::string(key) + " must have two entries");
    return std::pair<double, double>{v[0], v[1]};
  };
  c.flip_prob = j.value("flip_prob", d.flip_prob);
  c.rot90_prob = j.value("rot90_prob", d.rot90_prob);
  c.elastic_prob = j.value("elastic_prob", d.elastic_prob);
  c.elastic_control_points = j.value("elastic_control_points", d.elastic_control_points);
  c.elastic_sigma_vox = j.value("elastic_sigma_vox", d.elastic_sigma_vox);
  c.intensity_scale_range = range("intensity_scale_range", d.intensity_scale_range);
  c.brightness_shift_range = range("brightness_shift_range", d.brightness_shift_range);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.blur_prob = j.value("blur_prob", d.blur_prob);
  c.blur_sigma_range = range("blur_sigma_range", d.blur_sigma_range);
  c.channel_dropout_prob = j.value("channel_dropout_prob", d.channel_dropout_prob);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

torch::Tensor flip_spatial(const torch::Tensor& t, int axis) {
  return t.flip({t.dim() - 3 + axis});
}

torch::Tensor rot90_spatial(const torch::Tensor& t, int k, int a, int b) {
  const auto off = t.dim() - 3;
  return t.rot90(k, {off + a, off + b}).contiguous();
}

namespace {

// Smooth displacement field [1, P0, P1, P2, 3] (grid_sample order x,y,z =
// last..first axis) in normalised [-1, 1] coordinates.
torch::Tensor elastic_grid(const Extent3& extent, const AugmentationConfig& cfg, Rng& rng) {
  const int64_t g = cfg.elastic_control_points;
  auto ctrl = torch::empty({1, 3, g, g, g}, torch::kFloat32);
  auto acc = ctrl.accessor<float, 5>();
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < g; ++i)
      for (int64_t j = 0; j < g; ++j)
        for (int64_t k = 0; k < g; ++k) acc[0][c][i][j][k] = static_cast<float>(cfg.elastic_sigma_vox * rng.normal());
  auto disp = F::interpolate(ctrl, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{extent[0], extent[1], extent[2]})
                                       .mode(torch::kTrilinear)
                                       .align_corners(true));
  // Voxel displacement -> normalised units (align_corners=true convention).
  for (int a = 0; a < 3; ++a) {
    const double scale = extent[a] > 1 ? 2.0 / static_cast<double>(extent[a] - 1) : 0.0;
    disp[0][a].mul_(scale);
  }
  std::vector<torch::Tensor> axes;
  for (int a = 0; a < 3; ++a) axes.push_back(torch::linspace(-1.0, 1.0, extent[a], torch::kFloat32));
  auto mesh = torch::meshgrid(axes, "ij");
  std::vector<torch::Tensor> coords;
  for (int a = 0; a < 3; ++a) coords.push_back(mesh[a] + disp[0][a]);
  // grid_sample expects (x, y, z) = (axis 2, axis 1, axis 0).
  return torch::stack({coords[2], coords[1], coords[0]}, -1).unsqueeze(0);
}

torch::Tensor gaussian_blur(const torch::Tensor& image, double sigma) {
  const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
  auto x = torch::arange(-radius, radius + 1, torch::kFloat32);
  auto kernel = torch::exp(-0.5 * (x / sigma).square());
  kernel = kernel / kernel.sum();
  auto out = image.unsqueeze(1);  // [C, 1, D, H, W]
  const int64_t n = kernel.numel();
  const std::array<std::vector<int64_t>, 3> shapes{std::vector<int64_t>{1, 1, n, 1, 1},
                                                   std::vector<int64_t>{1, 1, 1, n, 1},
                                                   std::vector<int64_t>{1, 1, 1, 1, n}};
  for (int a = 0; a < 3; ++a) {
    std::vector<int64_t> pad(6, 0);
    pad[4 - 2 * a] = radius;
    pad[5 - 2 * a] = radius;
    out = F::pad(out, F::PadFuncOptions(pad).mode(torch::kReplicate));
    out = F::conv3d(out, kernel.reshape(shapes[a]));
  }
  return out.squeeze(1);
}

}  // namespace

Patch augment(const Patch& patch, const AugmentationConfig& cfg, Rng& rng) {
  Patch out = patch;
  auto image = patch.image;
  auto labels = patch.labels;
  const auto extent = spatial_extent(labels);

  for (int axis = 0; axis < 3; ++axis) {
    if (rng.bernoulli(cfg.flip_prob)) {
      image = flip_spatial(image, axis);
      labels = flip_spatial(labels, axis);
    }
  }

  if (rng.bernoulli(cfg.rot90_prob)) {
    // Only planes with equal sides keep the patch shape.
    std::vector<std::pair<int, int>> planes;
    for (auto [a, b] : {std::pair{0, 1}, std::pair{0, 2}, std::pair{1, 2}}) {
      if (extent[a] == extent[b]) planes.emplace_back(a, b);
    }
    if (!planes.empty()) {
      const auto [a, b] = planes[rng.below(planes.size())];
      const int k = 1 + static_cast<int>(rng.below(3));
      image = rot90_spatial(image, k, a, b);
      labels = rot90_spatial(labels, k, a, b);
    }
  }

  if (rng.bernoulli(cfg.elastic_prob)) {
    const auto grid = elastic_grid(extent, cfg, rng);
    image = F::grid_sample(image.unsqueeze(0), grid,
                           F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(true))
                .squeeze(0);
    labels = F::grid_sample(labels.to(torch::kFloat32).unsqueeze(0).unsqueeze(0), grid,
                            F::GridSampleFuncOptions().mode(torch::kNearest).padding_mode(torch::kZeros).align_corners(true))
                 .squeeze(0)
                 .squeeze(0)
                 .round()
                 .to(torch::kInt64);
  }

  // Intensity transforms. Draws happen unconditionally so the stream layout
  // does not depend on which ranges are degenerate.
  const double scale = rng.uniform(cfg.intensity_scale_range.first, cfg.intensity_scale_range.second);
  const double shift = rng.uniform(cfg.brightness_shift_range.first, cfg.brightness_shift_range.second);
  if (scale != 1.0) image = image * scale;
  if (shift != 0.0) image = image + shift;
  if (cfg.noise_sigma > 0.0) {
    auto gen = rng.torch_generator();
    image = image + cfg.noise_sigma * at::randn(image.sizes(), gen, image.options());
  }
  if (rng.bernoulli(cfg.blur_prob)) {
    image = gaussian_blur(image, rng.uniform(cfg.blur_sigma_range.first, cfg.blur_sigma_range.second));
  }
  if (rng.bernoulli(cfg.channel_dropout_prob)) {
    image = image.clone();
    image[static_cast<int64_t>(rng.below(static_cast<uint64_t>(image.size(0))))].zero_();
  }

  out.image = image.contiguous();
  out.labels = labels.contiguous();
  return out;
}

}  // namespace segguide
