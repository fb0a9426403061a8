#pragma once

#include "segguide/dataset.hpp"

#include <torch/torch.h>

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("segguide_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline torch::Tensor random_labels(std::mt19937_64& gen, int64_t d, int64_t h, int64_t w) {
  std::uniform_int_distribution<int64_t> dist(0, 3);
  auto t = torch::empty({d, h, w}, torch::kInt64);
  auto* p = t.data_ptr<int64_t>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = dist(gen);
  return t;
}

inline torch::Tensor random_mask(std::mt19937_64& gen, int64_t d, int64_t h, int64_t w, double p) {
  std::bernoulli_distribution dist(p);
  auto t = torch::empty({d, h, w}, torch::kBool);
  auto* q = t.data_ptr<bool>();
  for (int64_t i = 0; i < t.numel(); ++i) q[i] = dist(gen);
  return t;
}

inline segguide::Subject small_subject(const std::string& id, int64_t n = 8, uint64_t seed = 1) {
  std::mt19937_64 gen(seed);
  auto channels = torch::rand({4, n, n, n}, torch::TensorOptions().dtype(torch::kFloat32)) + 0.5;
  auto labels = random_labels(gen, n, n, n);
  return {segguide::MpMriVolume::from_channels(channels, id), segguide::LabelMap(labels)};
}

}  // namespace testutil
