#include "segguide/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace segguide {

using torch::indexing::Slice;

MpMriVolume zscore_normalize(const MpMriVolume& volume) {
  const auto& mask = volume.brain_mask();
  const auto n = mask.sum().item<int64_t>();
  if (n == 0) throw ValidationError("cannot normalise '" + volume.subject_id() + "': empty brain mask");
  auto out = torch::zeros_like(volume.channels());
  const auto maskf = mask.to(torch::kFloat64);
  for (int64_t c = 0; c < kNumModalities; ++c) {
    const auto ch = volume.channels()[c].to(torch::kFloat64);
    const double mean = (ch * maskf).sum().item<double>() / static_cast<double>(n);
    const double var = ((ch - mean).square() * maskf).sum().item<double>() / static_cast<double>(n);
    const double sd = std::sqrt(var);
    if (sd < kDegenerateStd) continue;
    out[c] = torch::where(mask, (ch - mean) / sd, torch::zeros_like(ch)).to(torch::kFloat32);
  }
  return MpMriVolume(out, mask, volume.subject_id(), volume.voxel_spacing_mm());
}

int64_t crop_start(int64_t centre, int64_t extent, int64_t patch) {
  const int64_t start = centre - patch / 2;
  if (extent >= patch) return std::clamp<int64_t>(start, 0, extent - patch);
  return std::clamp<int64_t>(start, extent - patch, 0);
}

Patch extract_patch(const torch::Tensor& image, const torch::Tensor& labels, const Extent3& origin,
                    const Extent3& patch) {
  const auto extent = spatial_extent(labels);
  Patch out;
  out.origin = origin;
  out.image = torch::zeros({image.size(0), patch[0], patch[1], patch[2]}, image.options());
  out.labels = torch::zeros({patch[0], patch[1], patch[2]}, labels.options());
  std::array<Slice, 3> src;
  std::array<Slice, 3> dst;
  for (int a = 0; a < 3; ++a) {
    const int64_t lo = std::max<int64_t>(origin[a], 0);
    const int64_t hi = std::min<int64_t>(origin[a] + patch[a], extent[a]);
    if (hi <= lo) return out;
    src[a] = Slice(lo, hi);
    dst[a] = Slice(lo - origin[a], hi - origin[a]);
  }
  out.image.index_put_({Slice(), dst[0], dst[1], dst[2]}, image.index({Slice(), src[0], src[1], src[2]}));
  out.labels.index_put_({dst[0], dst[1], dst[2]}, labels.index({src[0], src[1], src[2]}));
  return out;
}

namespace {

Patch crop_around(const MpMriVolume& volume, const LabelMap& labels, const Extent3& centre,
                  const Extent3& patch) {
  if (volume.extent() != labels.extent()) {
    throw ValidationError("volume and label extents differ for '" + volume.subject_id() + "'");
  }
  const auto extent = labels.extent();
  Extent3 origin{};
  for (int a = 0; a < 3; ++a) origin[a] = crop_start(centre[a], extent[a], patch[a]);
  return extract_patch(volume.channels(), labels.labels(), origin, patch);
}

Extent3 unravel(int64_t flat, const Extent3& extent) {
  const int64_t z = flat % extent[2];
  const int64_t y = (flat / extent[2]) % extent[1];
  const int64_t x = flat / (extent[1] * extent[2]);
  return {x, y, z};
}

}  // namespace

Patch tumour_biased_crop(const MpMriVolume& volume, const LabelMap& labels, const Extent3& patch,
                         double fg_prob, Rng& rng) {
  const auto extent = labels.extent();
  const bool want_fg = rng.bernoulli(fg_prob);
  Extent3 centre{};
  bool fg = false;
  if (want_fg) {
    // Foreground voxel count is small relative to the grid; nonzero() is fine.
    const auto flat = labels.labels().reshape({-1});
    const auto fg_idx = (flat > 0).nonzero().reshape({-1});
    if (fg_idx.numel() > 0) {
      const auto pick = fg_idx[static_cast<int64_t>(rng.below(static_cast<uint64_t>(fg_idx.numel())))];
      centre = unravel(pick.item<int64_t>(), extent);
      fg = true;
    }
  }
  if (!fg) {
    for (int a = 0; a < 3; ++a) centre[a] = static_cast<int64_t>(rng.below(static_cast<uint64_t>(extent[a])));
  }
  auto out = crop_around(volume, labels, centre, patch);
  out.foreground_centred = fg;
  return out;
}

Patch center_crop(const MpMriVolume& volume, const LabelMap& labels, const Extent3& patch) {
  const auto extent = labels.extent();
  return crop_around(volume, labels, {extent[0] / 2, extent[1] / 2, extent[2] / 2}, patch);
}

torch::Tensor paste_labels(const torch::Tensor& patch_labels, const Extent3& origin, const Extent3& extent) {
  auto out = torch::zeros({extent[0], extent[1], extent[2]}, patch_labels.options());
  const auto patch = spatial_extent(patch_labels);
  std::array<Slice, 3> src;
  std::array<Slice, 3> dst;
  for (int a = 0; a < 3; ++a) {
    const int64_t lo = std::max<int64_t>(origin[a], 0);
    const int64_t hi = std::min<int64_t>(origin[a] + patch[a], extent[a]);
    if (hi <= lo) return out;
    dst[a] = Slice(lo, hi);
    src[a] = Slice(lo - origin[a], hi - origin[a]);
  }
  out.index_put_({dst[0], dst[1], dst[2]}, patch_labels.index({src[0], src[1], src[2]}));
  return out;
}

}  // namespace segguide
