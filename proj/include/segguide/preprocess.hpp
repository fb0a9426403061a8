// Intensity normalisation and patch extraction.
#pragma once

#include "segguide/dataset.hpp"
#include "segguide/rng.hpp"

namespace segguide {

/// Masked std below this zeroes the channel instead of dividing.
inline constexpr double kDegenerateStd = 1e-6;

/// Per-channel z-score over brain-mask voxels; voxels outside the mask are 0.
MpMriVolume zscore_normalize(const MpMriVolume& volume);

/// A training or inference patch. image: float32 [4, P...]; labels: int64 [P...].
struct Patch {
  torch::Tensor image;
  torch::Tensor labels;
  Extent3 origin{};  // position of the patch's first voxel in the source grid
  bool foreground_centred = false;
};

/// Crop start along one axis for a crop centred on `centre`. When the axis is
/// at least `patch` long the window is clamped inside the volume; otherwise
/// it is clamped so the whole axis lies inside the (zero-padded) window.
int64_t crop_start(int64_t centre, int64_t extent, int64_t patch);

/// Copies the window at `origin`, zero-filling (background) outside the grid.
Patch extract_patch(const torch::Tensor& image, const torch::Tensor& labels, const Extent3& origin,
                    const Extent3& patch);

/// With probability fg_prob the centre is a uniformly drawn foreground voxel
/// (label > 0), otherwise a uniform voxel. Subjects without foreground always
/// take a uniform centre.
Patch tumour_biased_crop(const MpMriVolume& volume, const LabelMap& labels, const Extent3& patch,
                         double fg_prob, Rng& rng);

/// Centre at floor(extent / 2) per axis.
Patch center_crop(const MpMriVolume& volume, const LabelMap& labels, const Extent3& patch);

/// Inverse of a crop for predictions: places `patch_labels` at `origin` in a
/// background grid of `extent`.
torch::Tensor paste_labels(const torch::Tensor& patch_labels, const Extent3& origin, const Extent3& extent);

}  // namespace segguide
