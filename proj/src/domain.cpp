#include "segguide/domain.hpp"

#include <sstream>

namespace segguide {

Extent3 spatial_extent(const torch::Tensor& grid) {
  const auto n = grid.dim();
  if (n < 3) throw ValidationError("grid needs at least 3 dimensions");
  return {grid.size(n - 3), grid.size(n - 2), grid.size(n - 1)};
}

std::string to_string(const Extent3& extent) {
  std::ostringstream os;
  os << extent[0] << "x" << extent[1] << "x" << extent[2];
  return os.str();
}

MpMriVolume::MpMriVolume(torch::Tensor channels, torch::Tensor brain_mask,
                         std::string subject_id, Spacing3 voxel_spacing_mm)
    : channels_(std::move(channels)),
      brain_mask_(std::move(brain_mask)),
      subject_id_(std::move(subject_id)),
      spacing_(voxel_spacing_mm) {
  if (channels_.dim() != 4 || channels_.size(0) != kNumModalities) {
    throw ValidationError("volume '" + subject_id_ + "' must have shape [4, D, H, W]");
  }
  if (brain_mask_.dim() != 3 || spatial_extent(brain_mask_) != spatial_extent(channels_)) {
    throw ValidationError("brain mask of '" + subject_id_ + "' does not match channel extent " +
                          to_string(spatial_extent(channels_)));
  }
  for (double s : spacing_) {
    if (!(s > 0.0)) throw ValidationError("voxel spacing must be positive");
  }
  channels_ = channels_.to(torch::kFloat32).contiguous();
  brain_mask_ = brain_mask_.to(torch::kBool).contiguous();
}

MpMriVolume MpMriVolume::from_channels(torch::Tensor channels, std::string subject_id,
                                       Spacing3 voxel_spacing_mm) {
  if (channels.dim() != 4) throw ValidationError("channels must have shape [4, D, H, W]");
  auto mask = (channels != 0).any(0);
  return MpMriVolume(std::move(channels), std::move(mask), std::move(subject_id),
                     voxel_spacing_mm);
}

void validate_label_values(const torch::Tensor& labels) {
  if (labels.numel() == 0) return;
  auto invalid = (labels < 0).logical_or(labels >= kNumClasses);
  if (invalid.any().item<bool>()) {
    const auto bad = labels.masked_select(invalid)[0].item<double>();
    std::ostringstream os;
    os << "label value " << bad << " outside {0,1,2,3}";
    throw ValidationError(os.str());
  }
}

LabelMap::LabelMap(torch::Tensor labels) : labels_(std::move(labels)) {
  if (labels_.dim() != 3) throw ValidationError("label map must have shape [D, H, W]");
  if (labels_.is_floating_point()) {
    if (!torch::equal(labels_, labels_.round())) {
      throw ValidationError("label map holds non-integer values");
    }
  }
  validate_label_values(labels_);
  labels_ = labels_.to(torch::kInt64).contiguous();
}

SubRegionMasks derive_subregion_masks(const LabelMap& labels) {
  const auto& t = labels.labels();
  return {t == static_cast<int64_t>(Label::kNecrosis), t == static_cast<int64_t>(Label::kEdema),
          t == static_cast<int64_t>(Label::kEnhancing)};
}

CompoundRegionMasks derive_compound_masks(const LabelMap& labels) {
  const auto& t = labels.labels();
  auto et = t == static_cast<int64_t>(Label::kEnhancing);
  auto tc = et.logical_or(t == static_cast<int64_t>(Label::kNecrosis));
  auto wt = t > 0;
  return {et, tc, wt};
}

torch::Tensor argmax_labels(const torch::Tensor& seg_logits) {
  const auto n = seg_logits.dim();
  if ((n != 4 && n != 5) || seg_logits.size(n - 4) != kNumClasses) {
    throw ValidationError("segmentation logits must have shape [(B,) 4, D, H, W]");
  }
  if (!torch::isfinite(seg_logits).all().item<bool>()) {
    throw ValidationError("segmentation logits contain non-finite values");
  }
  // Strict '>' keeps the earliest class on ties.
  const auto class_dim = n - 4;
  auto best = seg_logits.select(class_dim, 0).clone();
  auto labels = torch::zeros_like(best, torch::kInt64);
  for (int64_t c = 1; c < kNumClasses; ++c) {
    auto candidate = seg_logits.select(class_dim, c);
    auto better = candidate > best;
    best = torch::where(better, candidate, best);
    labels.masked_fill_(better, c);
  }
  return labels;
}

LabelMap labels_from_logits(const torch::Tensor& seg_logits) {
  if (seg_logits.dim() != 4) throw ValidationError("expected unbatched [4, D, H, W] logits");
  return LabelMap(argmax_labels(seg_logits));
}

torch::Tensor one_hot_classes(const torch::Tensor& labels) {
  auto oh = torch::one_hot(labels.to(torch::kInt64), kNumClasses).to(torch::kFloat32);
  // [.., D, H, W, C] -> [.., C, D, H, W]
  return oh.movedim(-1, -4).contiguous();
}

}  // namespace segguide
