// SegGuidedNet: residual 3D encoder-decoder with a supervised per-sub-region
// attention branch on the last decoder feature map.
#pragma once

#include "segguide/domain.hpp"

#include <nlohmann/json.hpp>

namespace segguide {

struct NetworkConfig {
  int64_t in_channels = kNumModalities;
  int64_t num_classes = kNumClasses;
  int64_t num_subregions = kNumSubRegions;
  int64_t base_channels = 32;
  std::array<int64_t, 4> channel_widths{32, 64, 128, 256};
  int64_t bottleneck_channels = 320;
  int64_t attention_hidden_channels = 16;
  double dropout_p = 0.1;
  double leaky_slope = 0.01;

  /// Widths {b, 2b, 4b, 8b} and a 10b bottleneck; b = 32 gives the defaults.
  static NetworkConfig with_base_channels(int64_t base);
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

/// Spatial extents must be divisible by this (four 2x pooling stages).
inline constexpr int64_t kSpatialDivisor = 16;

/// Two 3x3x3 conv + InstanceNorm + LeakyReLU stages, volumetric dropout after
/// the second activation, and a residual path (identity, or a 1x1x1
/// projection when the channel count changes).
class ResConvBlockImpl : public torch::nn::Module {
 public:
  ResConvBlockImpl(int64_t in_channels, int64_t out_channels, double dropout_p, double leaky_slope);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_channels() const { return in_channels_; }
  int64_t out_channels() const { return out_channels_; }
  bool has_projection() const { return !projection_.is_empty(); }

 private:
  int64_t in_channels_;
  int64_t out_channels_;
  double leaky_slope_;
  torch::nn::Conv3d conv1_{nullptr};
  torch::nn::InstanceNorm3d norm1_{nullptr};
  torch::nn::Conv3d conv2_{nullptr};
  torch::nn::InstanceNorm3d norm2_{nullptr};
  torch::nn::Dropout3d dropout_{nullptr};
  torch::nn::Conv3d projection_{nullptr};
};
TORCH_MODULE(ResConvBlock);

/// L_attn = W1(LeakyReLU(IN(W3(d1)))) with W3: 3x3x3, in -> hidden and
/// W1: 1x1x1, hidden -> 3. Returns logits; channels are (NCR, ED, ET).
class SegAttentionGateImpl : public torch::nn::Module {
 public:
  SegAttentionGateImpl(int64_t in_channels, int64_t hidden_channels, int64_t num_subregions,
                       double leaky_slope);
  torch::Tensor forward(const torch::Tensor& decoder_features);

  torch::nn::Conv3d& output_conv() { return conv1x1_; }

 private:
  int64_t in_channels_;
  double leaky_slope_;
  torch::nn::Conv3d conv3x3_{nullptr};
  torch::nn::InstanceNorm3d norm_{nullptr};
  torch::nn::Conv3d conv1x1_{nullptr};
};
TORCH_MODULE(SegAttentionGate);

class SegGuidedNetImpl : public torch::nn::Module {
 public:
  explicit SegGuidedNetImpl(NetworkConfig config = {});

  /// x: [B, 4, D, H, W] with D, H, W divisible by 16. Train/eval follows
  /// is_training() (dropout only).
  NetworkOutput forward(const torch::Tensor& x);

  /// Decoder-1 features (input of both heads), exposed for gradient checks.
  torch::Tensor decode(const torch::Tensor& x);

  const NetworkConfig& config() const { return config_; }
  SegAttentionGate& attention_gate() { return gate_; }
  ResConvBlock& decoder_block(size_t level) { return decoders_.at(level); }

 private:
  NetworkConfig config_;
  std::vector<ResConvBlock> encoders_;
  ResConvBlock bottleneck_{nullptr};
  std::vector<torch::nn::ConvTranspose3d> upsamplers_;
  std::vector<ResConvBlock> decoders_;  // decoders_[0] is the finest level
  torch::nn::Conv3d seg_head_{nullptr};
  SegAttentionGate gate_{nullptr};
};
TORCH_MODULE(SegGuidedNet);

/// Throws ValidationError unless every spatial extent is a positive multiple of 16.
void check_input_extent(const torch::Tensor& x);

/// Kaiming-normal (fan-in, LeakyReLU gain for the configured slope) on every
/// convolution kernel, zero biases, unit/zero norm affines. The attention
/// gate's 1x1x1 output kernel starts at zero so an unsupervised gate emits
/// sigma = 0.5 everywhere. Deterministic in seed; the global torch RNG is
/// left untouched.
void initialize_weights(SegGuidedNet& net, uint64_t seed);

/// Kaiming-normal std for a weight tensor, PyTorch fan-in convention
/// (size(1) * receptive field).
double kaiming_std(const torch::Tensor& weight, double leaky_slope);

int64_t count_parameters(const torch::nn::Module& module);

/// Closed-form parameter counts for the architecture (independent of torch).
int64_t res_conv_block_parameter_count(int64_t in_channels, int64_t out_channels);
int64_t attention_gate_parameter_count(const NetworkConfig& config);
int64_t network_parameter_count(const NetworkConfig& config);

}  // namespace segguide
