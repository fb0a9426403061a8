// Core value types and the label/region algebra for mpMRI tumour segmentation.
#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace segguide {

inline constexpr int64_t kNumModalities = 4;
inline constexpr int64_t kNumClasses = 4;
inline constexpr int64_t kNumSubRegions = 3;

/// Voxel labels of the BraTS adult-glioma convention.
enum class Label : int64_t {
  kBackground = 0,
  kNecrosis = 1,   // NCR
  kEdema = 2,      // ED (SNFH in the 2023 release)
  kEnhancing = 3,  // ET
};

/// Channel order of every MpMriVolume.
enum class Modality : int { kT1 = 0, kT1ce = 1, kT2 = 2, kFlair = 3 };

using Extent3 = std::array<int64_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Thrown when an input violates a documented precondition or type invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Extent3 spatial_extent(const torch::Tensor& grid);
std::string to_string(const Extent3& extent);

/// Four co-registered modalities (T1, T1ce, T2, FLAIR) plus the brain mask.
///
/// channels: float32 [4, D, H, W]; brain_mask: bool [D, H, W].
class MpMriVolume {
 public:
  MpMriVolume(torch::Tensor channels, torch::Tensor brain_mask, std::string subject_id,
              Spacing3 voxel_spacing_mm = {1.0, 1.0, 1.0});

  /// Brain mask taken as the union of nonzero voxels over all channels.
  static MpMriVolume from_channels(torch::Tensor channels, std::string subject_id,
                                   Spacing3 voxel_spacing_mm = {1.0, 1.0, 1.0});

  const torch::Tensor& channels() const { return channels_; }
  const torch::Tensor& brain_mask() const { return brain_mask_; }
  const std::string& subject_id() const { return subject_id_; }
  const Spacing3& voxel_spacing_mm() const { return spacing_; }
  Extent3 extent() const { return spatial_extent(brain_mask_); }

 private:
  torch::Tensor channels_;
  torch::Tensor brain_mask_;
  std::string subject_id_;
  Spacing3 spacing_;
};

/// Voxel-wise labels in {0,1,2,3}, stored as int64 [D, H, W].
class LabelMap {
 public:
  explicit LabelMap(torch::Tensor labels);

  const torch::Tensor& labels() const { return labels_; }
  Extent3 extent() const { return spatial_extent(labels_); }

 private:
  torch::Tensor labels_;
};

/// Direct annotated sub-regions; pairwise disjoint bool masks.
struct SubRegionMasks {
  torch::Tensor ncr;
  torch::Tensor ed;
  torch::Tensor et;
};

/// Evaluation regions; et ⊆ tc ⊆ wt.
struct CompoundRegionMasks {
  torch::Tensor et;
  torch::Tensor tc;
  torch::Tensor wt;
};

/// Network heads over the input grid. Tensors may carry a leading batch dim.
struct NetworkOutput {
  torch::Tensor seg_logits;   // [.., 4, D, H, W]
  torch::Tensor attn_logits;  // [.., 3, D, H, W], channels (NCR, ED, ET)
};

/// Throws ValidationError naming the first value outside {0..3}.
void validate_label_values(const torch::Tensor& labels);

SubRegionMasks derive_subregion_masks(const LabelMap& labels);
CompoundRegionMasks derive_compound_masks(const LabelMap& labels);

/// Per-voxel argmax over the class axis of [4, D, H, W] (or [B, 4, D, H, W])
/// logits. Ties resolve to the lowest class index.
torch::Tensor argmax_labels(const torch::Tensor& seg_logits);
LabelMap labels_from_logits(const torch::Tensor& seg_logits);

/// One-hot encoding [.., 4, D, H, W] float32 of an int64 label grid.
torch::Tensor one_hot_classes(const torch::Tensor& labels);

}  // namespace segguide
