#include "segguide/dataset.hpp"
#include "segguide/image_io.hpp"
#include "segguide/phantom.hpp"
#include "segguide/rng.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

using namespace segguide;
namespace fs = std::filesystem;

namespace {

template <typename T>
void put(std::vector<char>& buf, size_t offset, T value, bool big_endian) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if (big_endian) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(buf.data() + offset, bytes, sizeof(T));
}

// Minimal single-file NIfTI-1 writer, int16 voxels with scaling.
void write_nifti_by_hand(const fs::path& path, const std::array<int16_t, 3>& dims, const std::vector<int16_t>& data,
                         float slope, float inter, bool big_endian) {
  std::vector<char> buf(352, 0);
  put<int32_t>(buf, 0, 348, big_endian);
  put<int16_t>(buf, 40, 3, big_endian);
  for (int i = 0; i < 3; ++i) put<int16_t>(buf, 42 + 2 * i, dims[i], big_endian);
  for (int i = 3; i < 7; ++i) put<int16_t>(buf, 42 + 2 * i, 1, big_endian);
  put<int16_t>(buf, 70, 4, big_endian);
  put<int16_t>(buf, 72, 16, big_endian);
  put<float>(buf, 76, 1.0f, big_endian);
  put<float>(buf, 80, 1.5f, big_endian);
  put<float>(buf, 84, 2.0f, big_endian);
  put<float>(buf, 88, 3.0f, big_endian);
  put<float>(buf, 108, 352.0f, big_endian);
  put<float>(buf, 112, slope, big_endian);
  put<float>(buf, 116, inter, big_endian);
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  for (int16_t v : data) {
    buf.resize(buf.size() + 2);
    put<int16_t>(buf, buf.size() - 2, v, big_endian);
  }
  std::ofstream(path, std::ios::binary).write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

// Voxel count of each shell of a discrete ball by direct enumeration.
std::array<int64_t, 3> shell_counts(double r_et, double r_ncr, double r_wt) {
  std::array<int64_t, 3> n{0, 0, 0};
  const int R = static_cast<int>(std::ceil(r_wt));
  for (int dx = -R; dx <= R; ++dx) {
    for (int dy = -R; dy <= R; ++dy) {
      for (int dz = -R; dz <= R; ++dz) {
        const double d = std::sqrt(static_cast<double>(dx * dx + dy * dy + dz * dz));
        if (d <= r_et) {
          ++n[2];
        } else if (d <= r_ncr) {
          ++n[0];
        } else if (d <= r_wt) {
          ++n[1];
        }
      }
    }
  }
  return n;  // NCR, ED, ET
}

std::vector<std::string> fake_ids(size_t n) {
  std::vector<std::string> ids;
  for (size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "BraTS2021_%05zu", i);
    ids.emplace_back(buf);
  }
  return ids;
}

DatasetIndex index_of(const std::vector<std::string>& ids) {
  DatasetIndex index;
  for (const auto& id : ids) index.subjects.push_back({id, {}, {}});
  return index;
}

}  // namespace

TEST_SUITE("rng") {
  TEST_CASE("streams are reproducible and keyed") {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(42, {1, 2}) == derive_seed(42, {1, 2}));
    CHECK(derive_seed(42, {1, 2}) != derive_seed(42, {2, 1}));
    CHECK(derive_seed(42, {1}) != derive_seed(43, {1}));
  }

  TEST_CASE("uniform, below and normal have the expected moments") {
    Rng r(11);
    double sum = 0.0, sum2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double u = r.uniform();
      CHECK_UNARY(u >= 0.0);
      CHECK_UNARY(u < 1.0);
      sum += u;
    }
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
    std::array<int, 5> counts{};
    for (int i = 0; i < 50000; ++i) ++counts[r.below(5)];
    for (int c : counts) CHECK(c == doctest::Approx(10000).epsilon(0.05));
    sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double z = r.normal();
      sum += z;
      sum2 += z * z;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.02));
  }

  TEST_CASE("shuffle is a permutation") {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    Rng r(5);
    auto w = v;
    r.shuffle(w);
    CHECK(w != v);
    std::sort(w.begin(), w.end());
    CHECK(w == v);
  }
}

TEST_SUITE("image_io") {
  TEST_CASE("NIfTI and raw round trips preserve data and spacing") {
    testutil::TempDir dir("io");
    ScalarImage img{torch::randn({5, 6, 7}), {1.0, 1.5, 2.5}};
    for (const char* name : {"a.nii.gz", "a.nii", "a.raw"}) {
      CAPTURE(name);
      write_image(dir.path() / name, img);
      const auto back = read_image(dir.path() / name);
      CHECK(torch::equal(back.data, img.data));
      CHECK(back.spacing_mm == img.spacing_mm);
    }
    write_image(dir.path() / "seg.nii.gz", ScalarImage{torch::tensor({0.f, 1.f, 2.f, 3.f}).reshape({1, 2, 2})},
                VoxelType::kUInt8);
    CHECK(torch::equal(read_image(dir.path() / "seg.nii.gz").data,
                       torch::tensor({0.f, 1.f, 2.f, 3.f}).reshape({1, 2, 2})));
  }

  TEST_CASE("reader decodes an independently written header in either byte order") {
    testutil::TempDir dir("nifti");
    std::vector<int16_t> data(2 * 3 * 4);
    for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<int16_t>(static_cast<int>(i) - 5);
    for (bool big : {false, true}) {
      CAPTURE(big);
      const auto path = dir.path() / (big ? "be.nii" : "le.nii");
      write_nifti_by_hand(path, {2, 3, 4}, data, 2.0f, 1.0f, big);
      const auto img = read_image(path);
      REQUIRE(img.data.sizes() == torch::IntArrayRef({2, 3, 4}));
      CHECK(img.spacing_mm == Spacing3{1.5, 2.0, 3.0});
      for (int x = 0; x < 2; ++x) {
        for (int y = 0; y < 3; ++y) {
          for (int z = 0; z < 4; ++z) {
            const int i = x + 2 * y + 6 * z;
            CHECK(img.data[x][y][z].item<float>() == static_cast<float>(2 * (i - 5) + 1));
          }
        }
      }
    }
  }

  TEST_CASE("unreadable files raise") {
    testutil::TempDir dir("bad");
    std::ofstream(dir.path() / "junk.nii") << "not an image";
    CHECK_THROWS(read_image(dir.path() / "junk.nii"));
    CHECK_THROWS(read_image(dir.path() / "missing.nii.gz"));
  }
}

TEST_SUITE("dataset") {
  TEST_CASE("scan finds complete subjects in sorted order") {
    testutil::TempDir dir("scan");
    for (const char* id : {"c", "a", "b"}) write_subject(dir.path(), testutil::small_subject(id));
    const auto index = scan_dataset(dir.path());
    REQUIRE(index.subjects.size() == 3);
    CHECK(index.subjects[0].subject_id == "a");
    CHECK(index.subjects[2].subject_id == "c");
    CHECK(index.subjects[1].modality_files[3].filename() == "b_flair.nii.gz");
  }

  TEST_CASE("scan names the subject with a missing modality") {
    testutil::TempDir dir("missing");
    write_subject(dir.path(), testutil::small_subject("good"));
    write_subject(dir.path(), testutil::small_subject("bad"));
    fs::remove(dir.path() / "bad" / "bad_flair.nii.gz");
    try {
      scan_dataset(dir.path());
      FAIL("expected an error");
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      CHECK(msg.find("bad") != std::string::npos);
      CHECK(msg.find("bad_flair.nii.gz") != std::string::npos);
    }
    testutil::TempDir empty("empty");
    CHECK_THROWS(scan_dataset(empty.path()));
  }

  TEST_CASE("BraTS 2023 naming and raw fallback") {
    testutil::TempDir dir("naming");
    write_subject(dir.path(), testutil::small_subject("BraTS-GLI-00000-000"), NamingConvention::brats2023());
    const auto index = scan_dataset(dir.path(), NamingConvention::brats2023());
    REQUIRE(index.subjects.size() == 1);
    CHECK(index.subjects[0].modality_files[1].filename() == "BraTS-GLI-00000-000-t1c.nii.gz");
    testutil::TempDir raw("raw");
    const auto s = testutil::small_subject("r");
    write_subject(raw.path(), s, NamingConvention::raw_fallback());
    const auto loaded = load_subject(scan_dataset(raw.path(), NamingConvention::raw_fallback()).subjects[0]);
    CHECK(torch::equal(loaded.volume.channels(), s.volume.channels()));
  }

  TEST_CASE("split sizes follow floor arithmetic with the remainder in test") {
    const auto big = split_dataset(index_of(fake_ids(1251)), {}, 42);
    CHECK(big.count(Split::kTrain) == 875);
    CHECK(big.count(Split::kVal) == 125);
    CHECK(big.count(Split::kTest) == 251);
    const auto small = split_dataset(index_of(fake_ids(10)), {}, 42);
    CHECK(small.count(Split::kTrain) == 7);
    CHECK(small.count(Split::kVal) == 1);
    CHECK(small.count(Split::kTest) == 2);
  }

  TEST_CASE("split is a deterministic partition depending only on ids and seed") {
    const auto ids = fake_ids(100);
    const auto a = split_dataset(index_of(ids), {}, 42);
    auto reversed = ids;
    std::reverse(reversed.begin(), reversed.end());
    const auto b = split_dataset(index_of(reversed), {}, 42);
    CHECK((a.split_assignment == b.split_assignment));
    CHECK(a.split_assignment.size() == 100);
    const auto c = split_dataset(index_of(ids), {}, 7);
    CHECK((a.split_assignment != c.split_assignment));
    CHECK_THROWS_AS(split_dataset(index_of(fake_ids(2))), ValidationError);
    CHECK_THROWS_AS(split_dataset(index_of(ids), {0.7, 0.2, 0.2}), ValidationError);
  }

  TEST_CASE("split manifest round trip") {
    testutil::TempDir dir("manifest");
    const auto index = split_dataset(index_of(fake_ids(20)), {}, 42);
    write_split_manifest(dir.path() / "split_manifest.txt", index);
    std::ifstream in(dir.path() / "split_manifest.txt");
    std::string first;
    std::getline(in, first);
    CHECK(first == "# split_manifest v1");
    CHECK((read_split_manifest(dir.path() / "split_manifest.txt") == index.split_assignment));
  }

  TEST_CASE("load rejects modalities of different shapes") {
    testutil::TempDir dir("shape");
    const auto entry = write_subject(dir.path(), testutil::small_subject("s"));
    write_image(entry.modality_files[2], ScalarImage{torch::ones({8, 8, 9})});
    CHECK_THROWS(load_subject(entry));
  }
}

TEST_SUITE("phantom") {
  TEST_CASE("noise-free shells match discrete ball counts") {
    PhantomSpec spec;
    spec.grid_size = {32, 32, 32};
    spec.tumour_center = {16.0, 16.0, 16.0};
    spec.radii_vox = {3.0, 5.0, 8.0};
    const auto s = generate_phantom(spec);
    const auto expected = shell_counts(3.0, 5.0, 8.0);
    const auto& l = s.labels.labels();
    CHECK((l == 1).sum().item<int64_t>() == expected[0]);
    CHECK((l == 2).sum().item<int64_t>() == expected[1]);
    CHECK((l == 3).sum().item<int64_t>() == expected[2]);
    CHECK(expected[2] == 123);  // lattice points in a ball of radius 3
  }

  TEST_CASE("intensity model and brain mask") {
    PhantomSpec spec;
    const auto s = generate_phantom(spec);
    const auto& ch = s.volume.channels();
    const auto& l = s.labels.labels();
    CHECK(ch[1].masked_select(l == 3).eq(3.0).all().item<bool>());
    CHECK(ch[1].masked_select(l == 1).eq(0.0).all().item<bool>());
    CHECK(ch[3].masked_select(l == 2).eq(2.0).all().item<bool>());
    CHECK(ch.select(0, 0).masked_select(s.volume.brain_mask().logical_not()).eq(0.0).all().item<bool>());
    CHECK(s.volume.brain_mask().logical_and(l > 0).sum().item<int64_t>() == (l > 0).sum().item<int64_t>());
  }

  TEST_CASE("deterministic in seed, nested regions, validated radii") {
    const auto a = generate_phantom(random_phantom_spec({32, 32, 32}, 0.1, 9));
    const auto b = generate_phantom(random_phantom_spec({32, 32, 32}, 0.1, 9));
    CHECK(torch::equal(a.volume.channels(), b.volume.channels()));
    CHECK(torch::equal(a.labels.labels(), b.labels.labels()));
    const auto c = derive_compound_masks(a.labels);
    CHECK(c.et.logical_and(c.tc.logical_not()).sum().item<int64_t>() == 0);
    CHECK(c.tc.logical_and(c.wt.logical_not()).sum().item<int64_t>() == 0);
    PhantomSpec bad;
    bad.radii_vox = {5.0, 3.0, 8.0};
    CHECK_THROWS_AS(generate_phantom(bad), ValidationError);
    bad.radii_vox = {3.0, 5.0, 20.0};
    CHECK_THROWS_AS(generate_phantom(bad), ValidationError);
  }

  TEST_CASE("disk round trip is exact") {
    testutil::TempDir dir("roundtrip");
    const auto cohort = generate_phantom_cohort(2, {16, 16, 16}, 0.2, 42);
    for (const auto& s : cohort) write_subject(dir.path(), s);
    const auto index = scan_dataset(dir.path());
    REQUIRE(index.subjects.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
      const auto back = load_subject(index.subjects[i]);
      CHECK(back.volume.subject_id() == cohort[i].volume.subject_id());
      CHECK(torch::equal(back.volume.channels(), cohort[i].volume.channels()));
      CHECK(torch::equal(back.volume.brain_mask(), cohort[i].volume.brain_mask()));
      CHECK(torch::equal(back.labels.labels(), cohort[i].labels.labels()));
    }
  }
}
