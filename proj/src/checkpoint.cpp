#include "segguide/checkpoint.hpp"

#include <stdexcept>

namespace segguide {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& path, SegGuidedNet& net, const CheckpointMeta& meta) {
  torch::serialize::OutputArchive archive;
  archive.write("format_version", c10::IValue(kCheckpointFormatVersion));
  archive.write("network_config", c10::IValue(nlohmann::json(meta.network).dump()));
  archive.write("seed", c10::IValue(static_cast<int64_t>(meta.seed)));
  archive.write("epoch", c10::IValue(meta.epoch));
  archive.write("val_loss", c10::IValue(meta.val_loss));
  archive.write("train_config", c10::IValue(meta.train_config_json));
  torch::serialize::OutputArchive weights;
  net->save(weights);
  archive.write("model", weights);
  // Write-then-rename so an interrupted save never leaves a torn checkpoint.
  const auto tmp = fs::path(path.string() + ".tmp");
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

namespace {

CheckpointMeta read_meta(torch::serialize::InputArchive& archive, const fs::path& path) {
  c10::IValue v;
  if (!archive.try_read("format_version", v) || v.toInt() != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint format in " + path.string());
  }
  CheckpointMeta meta;
  archive.read("network_config", v);
  meta.network = nlohmann::json::parse(v.toStringRef()).get<NetworkConfig>();
  archive.read("seed", v);
  meta.seed = static_cast<uint64_t>(v.toInt());
  archive.read("epoch", v);
  meta.epoch = v.toInt();
  archive.read("val_loss", v);
  meta.val_loss = v.toDouble();
  archive.read("train_config", v);
  meta.train_config_json = v.toStringRef();
  return meta;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  return read_meta(archive, path);
}

CheckpointMeta load_checkpoint(const fs::path& path, SegGuidedNet& net) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  auto meta = read_meta(archive, path);
  if (!(meta.network == net->config())) {
    throw std::runtime_error("checkpoint " + path.string() + " was saved for network config " +
                             nlohmann::json(meta.network).dump() + " but the model uses " +
                             nlohmann::json(net->config()).dump());
  }
  torch::serialize::InputArchive weights;
  archive.read("model", weights);
  net->load(weights);
  return meta;
}

std::pair<SegGuidedNet, CheckpointMeta> load_network(const fs::path& path) {
  auto meta = read_checkpoint_meta(path);
  SegGuidedNet net(meta.network);
  load_checkpoint(path, net);
  return {net, meta};
}

}  // namespace segguide
