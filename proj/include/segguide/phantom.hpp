// Synthetic mpMRI phantoms with concentric tumour shells.
#pragma once

#include "segguide/dataset.hpp"

namespace segguide {

/// Concentric shells around tumour_center (voxel coordinates):
///   d <= r_et          -> ET (3)
///   d <= r_ncr_outer   -> NCR (1)
///   d <= r_wt          -> ED (2)
/// The surrounding brain is a centred sphere with baseline intensity 1.0 in
/// every channel; everything outside brain and tumour is exactly 0.
struct PhantomSpec {
  Extent3 grid_size{32, 32, 32};
  std::array<double, 3> tumour_center{16.0, 16.0, 16.0};
  std::array<double, 3> radii_vox{3.0, 5.0, 8.0};  // r_et, r_ncr_outer, r_wt
  double noise_sigma = 0.0;
  uint64_t seed = 0;
  double brain_radius_fraction = 0.45;  // of the smallest grid extent

  void validate() const;
};

/// Draws radii and a tumour centre that fits inside the brain sphere.
PhantomSpec random_phantom_spec(const Extent3& grid_size, double noise_sigma, uint64_t seed);

/// Deterministic in spec.seed. Intensity offsets on top of the brain
/// baseline: ED +1 in FLAIR, ET +2 in T1ce, NCR -1 in T1ce. Gaussian noise is
/// added inside the brain only, so the nonzero-union brain mask is exact.
Subject generate_phantom(const PhantomSpec& spec, const std::string& subject_id = "phantom");

/// `count` phantoms with ids `phantom_000`.. drawn from derive_seed(seed, {i}).
std::vector<Subject> generate_phantom_cohort(size_t count, const Extent3& grid_size,
                                             double noise_sigma, uint64_t seed);

}  // namespace segguide
