// Platform-independent random streams.
//
// std::uniform_*_distribution and std::shuffle are implementation-defined, so
// every draw that feeds a reproducible artefact goes through this wrapper.
#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace segguide {

/// SplitMix64 finaliser.
uint64_t mix64(uint64_t x);

/// Derives an independent stream seed from a root seed and a key path, e.g.
/// derive_seed(seed, {epoch, sample}) so worker count never changes results.
uint64_t derive_seed(uint64_t root, std::initializer_list<uint64_t> keys);

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, n).
  uint64_t below(uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal (Box-Muller, no cached pair).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  /// CPU torch generator seeded from this stream.
  torch::Generator torch_generator();

 private:
  std::mt19937_64 engine_;
};

}  // namespace segguide
