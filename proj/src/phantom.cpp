#include "segguide/phantom.hpp"

#include "segguide/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace segguide {

void PhantomSpec::validate() const {
  for (auto g : grid_size) {
    if (g <= 0) throw ValidationError("phantom grid size must be positive");
  }
  const auto& r = radii_vox;
  if (!(r[0] > 0.0 && r[0] < r[1] && r[1] < r[2])) {
    throw ValidationError("phantom radii must satisfy 0 < r_et < r_ncr_outer < r_wt");
  }
  for (int a = 0; a < 3; ++a) {
    const double lo = tumour_center[a] - r[2];
    const double hi = tumour_center[a] + r[2];
    if (lo < 0.0 || hi > static_cast<double>(grid_size[a] - 1)) {
      throw ValidationError("tumour does not fit inside the phantom grid");
    }
  }
  if (noise_sigma < 0.0) throw ValidationError("noise_sigma must be nonnegative");
  if (!(brain_radius_fraction > 0.0)) throw ValidationError("brain radius must be positive");
}

PhantomSpec random_phantom_spec(const Extent3& grid_size, double noise_sigma, uint64_t seed) {
  Rng rng(derive_seed(seed, {0x5048414eULL}));
  PhantomSpec spec;
  spec.grid_size = grid_size;
  spec.noise_sigma = noise_sigma;
  spec.seed = seed;
  const double min_extent = static_cast<double>(*std::min_element(grid_size.begin(), grid_size.end()));
  const double brain_r = spec.brain_radius_fraction * min_extent;
  // Scale shells with the grid so 32^3 and 64^3 phantoms look alike.
  const double unit = min_extent / 64.0;
  const double r_et = unit * rng.uniform(3.0, 5.0);
  const double r_ncr = r_et + unit * rng.uniform(2.0, 4.0);
  const double r_wt = r_ncr + unit * rng.uniform(3.0, 6.0);
  spec.radii_vox = {r_et, r_ncr, r_wt};
  const double slack = std::max(0.0, brain_r - r_wt - 1.0) / std::sqrt(3.0);
  for (int a = 0; a < 3; ++a) {
    const double c = static_cast<double>(grid_size[a] - 1) / 2.0;
    spec.tumour_center[a] = c + rng.uniform(-slack, slack);
  }
  spec.validate();
  return spec;
}

Subject generate_phantom(const PhantomSpec& spec, const std::string& subject_id) {
  spec.validate();
  const auto [nx, ny, nz] = spec.grid_size;
  auto labels = torch::zeros({nx, ny, nz}, torch::kInt64);
  auto channels = torch::zeros({kNumModalities, nx, ny, nz}, torch::kFloat32);
  auto lab = labels.accessor<int64_t, 3>();
  auto ch = channels.accessor<float, 4>();

  const double min_extent = static_cast<double>(std::min({nx, ny, nz}));
  const double brain_r2 = std::pow(spec.brain_radius_fraction * min_extent, 2);
  const std::array<double, 3> brain_c{(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0};
  const auto& c = spec.tumour_center;
  const double r_et2 = spec.radii_vox[0] * spec.radii_vox[0];
  const double r_ncr2 = spec.radii_vox[1] * spec.radii_vox[1];
  const double r_wt2 = spec.radii_vox[2] * spec.radii_vox[2];

  Rng rng(derive_seed(spec.seed, {0x4e4f495345ULL}));
  constexpr int kT1ce = static_cast<int>(Modality::kT1ce);
  constexpr int kFlair = static_cast<int>(Modality::kFlair);

  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t z = 0; z < nz; ++z) {
        const double d2 = (x - c[0]) * (x - c[0]) + (y - c[1]) * (y - c[1]) + (z - c[2]) * (z - c[2]);
        const double b2 = (x - brain_c[0]) * (x - brain_c[0]) + (y - brain_c[1]) * (y - brain_c[1]) +
                          (z - brain_c[2]) * (z - brain_c[2]);
        int64_t label = 0;
        if (d2 <= r_et2) {
          label = 3;
        } else if (d2 <= r_ncr2) {
          label = 1;
        } else if (d2 <= r_wt2) {
          label = 2;
        }
        if (b2 > brain_r2 && label == 0) continue;
        lab[x][y][z] = label;
        std::array<double, 4> v{1.0, 1.0, 1.0, 1.0};
        if (label == 2) v[kFlair] += 1.0;
        if (label == 3) v[kT1ce] += 2.0;
        if (label == 1) v[kT1ce] -= 1.0;
        for (int m = 0; m < 4; ++m) {
          double value = v[m];
          if (spec.noise_sigma > 0.0) value += spec.noise_sigma * rng.normal();
          // Keep brain voxels nonzero so the nonzero-union mask stays exact.
          if (m == 0 && value == 0.0) value = 1e-6;
          ch[m][x][y][z] = static_cast<float>(value);
        }
      }
    }
  }
  auto mask = (labels > 0).logical_or((channels != 0).any(0));
  return {MpMriVolume(channels, mask, subject_id), LabelMap(labels)};
}

std::vector<Subject> generate_phantom_cohort(size_t count, const Extent3& grid_size, double noise_sigma,
                                             uint64_t seed) {
  std::vector<Subject> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%03zu", i);
    out.push_back(generate_phantom(random_phantom_spec(grid_size, noise_sigma, derive_seed(seed, {i})), id));
  }
  return out;
}

}  // namespace segguide
