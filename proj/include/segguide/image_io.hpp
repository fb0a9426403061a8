// Scalar volume I/O: NIfTI-1 (.nii / .nii.gz) and a raw binary fallback
// (.raw + .raw.json sidecar holding shape, spacing and dtype).
#pragma once

#include "segguide/domain.hpp"

#include <filesystem>

namespace segguide {

enum class VoxelType { kUInt8, kInt16, kFloat32 };

/// A single 3D scalar image. data is float32 [X, Y, Z] in NIfTI index order
/// (the last axis is the axial slice axis).
struct ScalarImage {
  torch::Tensor data;
  Spacing3 spacing_mm{1.0, 1.0, 1.0};
};

ScalarImage read_image(const std::filesystem::path& path);

/// Format chosen from the extension; integer voxel types round the data.
void write_image(const std::filesystem::path& path, const ScalarImage& image,
                 VoxelType type = VoxelType::kFloat32);

bool is_raw_path(const std::filesystem::path& path);

}  // namespace segguide
