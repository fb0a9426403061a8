// Versioned model checkpoints.
#pragma once

#include "segguide/network.hpp"

#include <filesystem>
#include <string>

namespace segguide {

inline constexpr int64_t kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  NetworkConfig network;
  uint64_t seed = 42;
  int64_t epoch = 0;
  double val_loss = 0.0;
  std::string train_config_json;  // full run configuration, for re-evaluation
};

void save_checkpoint(const std::filesystem::path& path, SegGuidedNet& net, const CheckpointMeta& meta);

/// Reads only the metadata.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Loads weights into `net`. Throws when the stored format version or network
/// configuration differs from `net`'s.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, SegGuidedNet& net);

/// Builds a network from the stored configuration and loads its weights.
std::pair<SegGuidedNet, CheckpointMeta> load_network(const std::filesystem::path& path);

}  // namespace segguide
