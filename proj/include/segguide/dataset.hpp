// Dataset layout, deterministic splitting and subject loading.
#pragma once

#include "segguide/domain.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace segguide {

/// File naming inside `<root>/<id>/`: `<id><suffix><extension>`.
struct NamingConvention {
  std::array<std::string, 4> modality_suffixes;  // T1, T1ce, T2, FLAIR
  std::string segmentation_suffix;
  std::string extension = ".nii.gz";

  /// `<id>_{t1,t1ce,t2,flair,seg}.nii.gz`
  static NamingConvention brats2021();
  /// `<id>-{t1n,t1c,t2w,t2f,seg}.nii.gz`
  static NamingConvention brats2023();
  /// BraTS 2021 suffixes over the raw+sidecar format.
  static NamingConvention raw_fallback();
};

enum class Split { kTrain, kVal, kTest };
const char* to_string(Split split);
Split split_from_string(const std::string& name);

struct SubjectEntry {
  std::string subject_id;
  std::array<std::filesystem::path, 4> modality_files;
  std::filesystem::path segmentation_file;
};

struct DatasetIndex {
  std::vector<SubjectEntry> subjects;  // sorted by subject_id
  std::map<std::string, Split> split_assignment;

  std::vector<SubjectEntry> subjects_in(Split split) const;
  size_t count(Split split) const;
};

struct SplitFractions {
  double train = 0.70;
  double val = 0.10;
  double test = 0.20;
};

struct Subject {
  MpMriVolume volume;
  LabelMap labels;
};

/// One entry per subject directory holding all five files. Throws listing
/// every incomplete subject, or when no subject is found.
DatasetIndex scan_dataset(const std::filesystem::path& root,
                          const NamingConvention& naming = NamingConvention::brats2021());

/// Deterministic shuffle of the sorted ids followed by floor-sized train and
/// val blocks; the test split takes the remainder.
DatasetIndex split_dataset(DatasetIndex index, const SplitFractions& fractions = {},
                           uint64_t seed = 42);

/// Channels are stacked as T1, T1ce, T2, FLAIR. The brain mask is the union
/// of nonzero voxels across channels.
Subject load_subject(const SubjectEntry& entry);

/// Writes a subject in the dataset layout and returns its entry.
SubjectEntry write_subject(const std::filesystem::path& root, const Subject& subject,
                           const NamingConvention& naming = NamingConvention::brats2021());

inline constexpr int kSplitManifestVersion = 1;

/// `# split_manifest v1` header, then `subject_id,split` lines in index order.
void write_split_manifest(const std::filesystem::path& path, const DatasetIndex& index);
std::map<std::string, Split> read_split_manifest(const std::filesystem::path& path);

}  // namespace segguide
