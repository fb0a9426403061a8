#include "segguide/dataset.hpp"

#include "segguide/image_io.hpp"
#include "segguide/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace segguide {

namespace fs = std::filesystem;

NamingConvention NamingConvention::brats2021() {
  return {{"_t1", "_t1ce", "_t2", "_flair"}, "_seg", ".nii.gz"};
}

NamingConvention NamingConvention::brats2023() {
  return {{"-t1n", "-t1c", "-t2w", "-t2f"}, "-seg", ".nii.gz"};
}

NamingConvention NamingConvention::raw_fallback() {
  auto n = brats2021();
  n.extension = ".raw";
  return n;
}

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ValidationError("unknown split '" + name + "'");
}

std::vector<SubjectEntry> DatasetIndex::subjects_in(Split split) const {
  std::vector<SubjectEntry> out;
  for (const auto& s : subjects) {
    auto it = split_assignment.find(s.subject_id);
    if (it != split_assignment.end() && it->second == split) out.push_back(s);
  }
  return out;
}

size_t DatasetIndex::count(Split split) const {
  return static_cast<size_t>(std::count_if(split_assignment.begin(), split_assignment.end(),
                                           [split](const auto& kv) { return kv.second == split; }));
}

namespace {

SubjectEntry entry_for(const fs::path& dir, const std::string& id, const NamingConvention& naming) {
  SubjectEntry e;
  e.subject_id = id;
  for (size_t m = 0; m < 4; ++m) {
    e.modality_files[m] = dir / (id + naming.modality_suffixes[m] + naming.extension);
  }
  e.segmentation_file = dir / (id + naming.segmentation_suffix + naming.extension);
  return e;
}

}  // namespace

DatasetIndex scan_dataset(const fs::path& root, const NamingConvention& naming) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + root.string());
  std::vector<std::string> ids;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) ids.push_back(d.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());

  DatasetIndex index;
  std::ostringstream missing;
  for (const auto& id : ids) {
    auto e = entry_for(root / id, id, naming);
    std::vector<fs::path> files(e.modality_files.begin(), e.modality_files.end());
    files.push_back(e.segmentation_file);
    bool complete = true;
    for (const auto& f : files) {
      if (!fs::exists(f)) {
        missing << "\n  subject " << id << ": missing " << f.filename().string();
        complete = false;
      }
    }
    if (complete) index.subjects.push_back(std::move(e));
  }
  if (!missing.str().empty()) {
    throw std::runtime_error("incomplete subjects under " + root.string() + ":" + missing.str());
  }
  if (index.subjects.empty()) throw std::runtime_error("no subjects found under " + root.string());
  return index;
}

DatasetIndex split_dataset(DatasetIndex index, const SplitFractions& fractions, uint64_t seed) {
  const double sum = fractions.train + fractions.val + fractions.test;
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0) {
    throw ValidationError("split fractions must be nonnegative");
  }
  const size_t n = index.subjects.size();
  if (n < 3) throw ValidationError("at least 3 subjects are needed to split");

  std::vector<std::string> ids;
  for (const auto& s : index.subjects) ids.push_back(s.subject_id);
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  rng.shuffle(ids);

  // The 1e-9 nudge keeps products like 10 * 0.7 from flooring to 6.
  const auto n_train = static_cast<size_t>(std::floor(static_cast<double>(n) * fractions.train + 1e-9));
  const auto n_val = static_cast<size_t>(std::floor(static_cast<double>(n) * fractions.val + 1e-9));

  index.split_assignment.clear();
  for (size_t i = 0; i < n; ++i) {
    Split s = Split::kTest;
    if (i < n_train) {
      s = Split::kTrain;
    } else if (i < n_train + n_val) {
      s = Split::kVal;
    }
    index.split_assignment[ids[i]] = s;
  }
  return index;
}

Subject load_subject(const SubjectEntry& entry) {
  std::vector<torch::Tensor> channels;
  Spacing3 spacing{1.0, 1.0, 1.0};
  Extent3 extent{};
  for (size_t m = 0; m < 4; ++m) {
    auto img = read_image(entry.modality_files[m]);
    const auto e = spatial_extent(img.data);
    if (m == 0) {
      extent = e;
      spacing = img.spacing_mm;
    } else if (e != extent) {
      throw std::runtime_error("subject " + entry.subject_id + ": modality " +
                               entry.modality_files[m].filename().string() + " has extent " +
                               to_string(e) + ", expected " + to_string(extent));
    }
    channels.push_back(img.data);
  }
  auto seg = read_image(entry.segmentation_file);
  if (spatial_extent(seg.data) != extent) {
    throw std::runtime_error("subject " + entry.subject_id + ": segmentation extent " +
                             to_string(spatial_extent(seg.data)) + " differs from " + to_string(extent));
  }
  try {
    return {MpMriVolume::from_channels(torch::stack(channels), entry.subject_id, spacing),
            LabelMap(seg.data.round().to(torch::kInt64))};
  } catch (const ValidationError& e) {
    throw ValidationError("subject " + entry.subject_id + ": " + e.what());
  }
}

SubjectEntry write_subject(const fs::path& root, const Subject& subject, const NamingConvention& naming) {
  const auto& id = subject.volume.subject_id();
  const auto dir = root / id;
  fs::create_directories(dir);
  auto e = entry_for(dir, id, naming);
  const auto spacing = subject.volume.voxel_spacing_mm();
  for (int64_t m = 0; m < 4; ++m) {
    write_image(e.modality_files[m], {subject.volume.channels()[m], spacing}, VoxelType::kFloat32);
  }
  write_image(e.segmentation_file, {subject.labels.labels().to(torch::kFloat32), spacing},
              VoxelType::kUInt8);
  return e;
}

void write_split_manifest(const fs::path& path, const DatasetIndex& index) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write split manifest: " + path.string());
  out << "# split_manifest v" << kSplitManifestVersion << "\n";
  for (const auto& s : index.subjects) {
    auto it = index.split_assignment.find(s.subject_id);
    if (it == index.split_assignment.end()) continue;
    out << s.subject_id << "," << to_string(it->second) << "\n";
  }
}

std::map<std::string, Split> read_split_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read split manifest: " + path.string());
  std::string line;
  std::getline(in, line);
  const std::string expected = "# split_manifest v" + std::to_string(kSplitManifestVersion);
  if (line != expected) {
    throw std::runtime_error("unsupported split manifest header '" + line + "' in " + path.string());
  }
  std::map<std::string, Split> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw std::runtime_error("malformed manifest line: " + line);
    out[line.substr(0, comma)] = split_from_string(line.substr(comma + 1));
  }
  return out;
}

}  // namespace segguide
