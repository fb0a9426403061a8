// Online augmentation of training patches.
#pragma once

#include "segguide/preprocess.hpp"

#include <nlohmann/json.hpp>

#include <utility>

namespace segguide {

struct AugmentationConfig {
  double flip_prob = 0.5;  // per axis
  double rot90_prob = 0.5;
  double elastic_prob = 0.2;
  int64_t elastic_control_points = 4;  // per axis
  double elastic_sigma_vox = 4.0;
  std::pair<double, double> intensity_scale_range{0.9, 1.1};
  std::pair<double, double> brightness_shift_range{-0.1, 0.1};
  double noise_sigma = 0.05;
  double blur_prob = 0.15;
  std::pair<double, double> blur_sigma_range{0.5, 1.0};
  double channel_dropout_prob = 0.1;
  uint64_t seed = 42;

  /// Every transform off; augment() is then the identity.
  static AugmentationConfig disabled();
  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentationConfig& c);
void from_json(const nlohmann::json& j, AugmentationConfig& c);

/// Spatial transforms hit image and labels alike (labels nearest-neighbour,
/// image trilinear); intensity transforms touch the image only. Output
/// shapes equal input shapes. Deterministic given the rng state.
Patch augment(const Patch& patch, const AugmentationConfig& cfg, Rng& rng);

/// Reverses the spatial axis `axis` (0..2) of an image [C, ...] or label grid.
torch::Tensor flip_spatial(const torch::Tensor& t, int axis);
/// Quarter turns in the plane of spatial axes (a, b).
torch::Tensor rot90_spatial(const torch::Tensor& t, int k, int a, int b);

}  // namespace segguide
