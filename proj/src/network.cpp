#include "segguide/network.hpp"

#include "segguide/rng.hpp"

#include <ATen/autocast_mode.h>

#include <cmath>
#include <utility>

namespace segguide {

namespace nn = torch::nn;

NetworkConfig NetworkConfig::with_base_channels(int64_t base) {
  NetworkConfig c;
  c.base_channels = base;
  c.channel_widths = {base, 2 * base, 4 * base, 8 * base};
  c.bottleneck_channels = 10 * base;
  return c;
}

void NetworkConfig::validate() const {
  if (in_channels <= 0 || num_classes <= 0 || num_subregions <= 0 || base_channels <= 0 ||
      bottleneck_channels <= 0 || attention_hidden_channels <= 0) {
    throw ValidationError("network channel counts must be positive");
  }
  for (auto w : channel_widths) {
    if (w <= 0) throw ValidationError("channel widths must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ValidationError("dropout_p must lie in [0, 1)");
  if (leaky_slope < 0.0) throw ValidationError("leaky_slope must be nonnegative");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"num_classes", c.num_classes},
       {"num_subregions", c.num_subregions},
       {"base_channels", c.base_channels},
       {"channel_widths", c.channel_widths},
       {"bottleneck_channels", c.bottleneck_channels},
       {"attention_hidden_channels", c.attention_hidden_channels},
       {"dropout_p", c.dropout_p},
       {"leaky_slope", c.leaky_slope}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c = NetworkConfig::with_base_channels(j.value("base_channels", int64_t{32}));
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.num_subregions = j.value("num_subregions", c.num_subregions);
  if (j.contains("channel_widths")) c.channel_widths = j.at("channel_widths").get<std::array<int64_t, 4>>();
  c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
  c.attention_hidden_channels = j.value("attention_hidden_channels", c.attention_hidden_channels);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.validate();
}

namespace {

nn::Conv3d conv(int64_t in, int64_t out, int64_t kernel) {
  return nn::Conv3d(nn::Conv3dOptions(in, out, kernel).padding(kernel / 2).bias(true));
}

nn::InstanceNorm3d instance_norm(int64_t channels) {
  return nn::InstanceNorm3d(nn::InstanceNorm3dOptions(channels).affine(true).track_running_stats(false).eps(1e-5));
}

// Float32 under autocast for extents below the kernel.
torch::Tensor convolve(nn::Conv3d& conv, const torch::Tensor& x) {
  const int64_t k = (*conv->options.kernel_size())[0];
  const bool below_kernel = x.size(2) < k || x.size(3) < k || x.size(4) < k;
  if (!below_kernel || !at::autocast::is_autocast_enabled(at::kCPU)) return conv(x);
  c10::impl::ExcludeDispatchKeyGuard no_autocast(c10::DispatchKey::AutocastCPU);
  return conv(x.to(torch::kFloat32));
}

}  // namespace

ResConvBlockImpl::ResConvBlockImpl(int64_t in_channels, int64_t out_channels, double dropout_p,
                                   double leaky_slope)
    : in_channels_(in_channels), out_channels_(out_channels), leaky_slope_(leaky_slope) {
  conv1_ = register_module("conv1", conv(in_channels, out_channels, 3));
  norm1_ = register_module("norm1", instance_norm(out_channels));
  conv2_ = register_module("conv2", conv(out_channels, out_channels, 3));
  norm2_ = register_module("norm2", instance_norm(out_channels));
  dropout_ = register_module("dropout", nn::Dropout3d(nn::Dropout3dOptions(dropout_p)));
  if (in_channels != out_channels) {
    projection_ = register_module("projection", conv(in_channels, out_channels, 1));
  }
}

torch::Tensor ResConvBlockImpl::forward(const torch::Tensor& x) {
#ifndef NDEBUG
  if (!torch::isfinite(x).all().item<bool>()) throw std::runtime_error("ResConvBlock: non-finite input");
#endif
  if (!torch::GradMode::is_enabled()) {
    // Inference: same arithmetic, in place, to bound peak memory at 128^3.
    auto h = norm1_(convolve(conv1_, x));
    torch::leaky_relu_(h, leaky_slope_);
    h = norm2_(convolve(conv2_, h));
    torch::leaky_relu_(h, leaky_slope_);
    h = dropout_(h);
    return h.add_(projection_.is_empty() ? x : projection_(x));
  }
  auto h = torch::leaky_relu(norm1_(convolve(conv1_, x)), leaky_slope_);
  h = torch::leaky_relu(norm2_(convolve(conv2_, h)), leaky_slope_);
  h = dropout_(h);
  return h + (projection_.is_empty() ? x : projection_(x));
}

SegAttentionGateImpl::SegAttentionGateImpl(int64_t in_channels, int64_t hidden_channels,
                                           int64_t num_subregions, double leaky_slope)
    : in_channels_(in_channels), leaky_slope_(leaky_slope) {
  conv3x3_ = register_module("conv3x3", conv(in_channels, hidden_channels, 3));
  norm_ = register_module("norm", instance_norm(hidden_channels));
  conv1x1_ = register_module("conv1x1", conv(hidden_channels, num_subregions, 1));
}

torch::Tensor SegAttentionGateImpl::forward(const torch::Tensor& decoder_features) {
  if (decoder_features.dim() != 5 || decoder_features.size(1) != in_channels_) {
    throw ValidationError("attention gate expects [B, " + std::to_string(in_channels_) +
                          ", D, H, W] decoder features");
  }
  return conv1x1_(torch::leaky_relu(norm_(convolve(conv3x3_, decoder_features)), leaky_slope_));
}

SegGuidedNetImpl::SegGuidedNetImpl(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& w = config_.channel_widths;
  const double p = config_.dropout_p;
  const double a = config_.leaky_slope;

  int64_t in = config_.in_channels;
  for (size_t level = 0; level < 4; ++level) {
    encoders_.push_back(register_module("encoder" + std::to_string(level + 1), ResConvBlock(in, w[level], p, a)));
    in = w[level];
  }
  bottleneck_ = register_module("bottleneck", ResConvBlock(in, config_.bottleneck_channels, p, a));

  // Coarsest first: upsample to the skip width, concatenate, fuse back down.
  int64_t below = config_.bottleneck_channels;
  upsamplers_.resize(4, nullptr);
  decoders_.resize(4, nullptr);
  for (int level = 3; level >= 0; --level) {
    const auto name = std::to_string(level + 1);
    upsamplers_[level] = register_module(
        "upsample" + name, nn::ConvTranspose3d(nn::ConvTranspose3dOptions(below, w[level], 2).stride(2)));
    decoders_[level] = register_module("decoder" + name, ResConvBlock(2 * w[level], w[level], p, a));
    below = w[level];
  }
  seg_head_ = register_module("seg_head", conv(w[0], config_.num_classes, 1));
  gate_ = register_module("attention_gate", SegAttentionGate(w[0], config_.attention_hidden_channels,
                                                             config_.num_subregions, a));
}

void check_input_extent(const torch::Tensor& x) {
  for (auto e : spatial_extent(x)) {
    if (e <= 0 || e % kSpatialDivisor != 0) {
      throw ValidationError("spatial extent " + to_string(spatial_extent(x)) + " is not divisible by " +
                            std::to_string(kSpatialDivisor));
    }
  }
}

torch::Tensor SegGuidedNetImpl::decode(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != config_.in_channels) {
    throw ValidationError("network input must be [B, " + std::to_string(config_.in_channels) + ", D, H, W]");
  }
  check_input_extent(x);
  std::array<torch::Tensor, 4> skips;
  auto h = x;
  for (size_t level = 0; level < 4; ++level) {
    skips[level] = encoders_[level](h);
    h = torch::max_pool3d(skips[level], 2);
  }
  h = bottleneck_(h);
  for (int level = 3; level >= 0; --level) {
    auto merged = torch::cat({upsamplers_[level](h), std::exchange(skips[level], {})}, 1);
    h = decoders_[level](std::exchange(merged, {}));
  }
  return h;
}

NetworkOutput SegGuidedNetImpl::forward(const torch::Tensor& x) {
  auto d1 = decode(x);
  return {seg_head_(d1), gate_(d1)};
}

double kaiming_std(const torch::Tensor& weight, double leaky_slope) {
  int64_t receptive = 1;
  for (int64_t d = 2; d < weight.dim(); ++d) receptive *= weight.size(d);
  const double fan_in = static_cast<double>(weight.size(1) * receptive);
  const double gain = std::sqrt(2.0 / (1.0 + leaky_slope * leaky_slope));
  return gain / std::sqrt(fan_in);
}

void initialize_weights(SegGuidedNet& net, uint64_t seed) {
  torch::NoGradGuard no_grad;
  Rng rng(seed);
  auto gen = rng.torch_generator();
  const double slope = net->config().leaky_slope;
  // named_modules order is registration order, hence deterministic.
  for (auto& item : net->named_modules()) {
    auto* m = item.value().get();
    if (auto* c = dynamic_cast<nn::Conv3dImpl*>(m)) {
      c->weight.normal_(0.0, kaiming_std(c->weight, slope), gen);
      if (c->bias.defined()) c->bias.zero_();
    } else if (auto* t = dynamic_cast<nn::ConvTranspose3dImpl*>(m)) {
      t->weight.normal_(0.0, kaiming_std(t->weight, slope), gen);
      if (t->bias.defined()) t->bias.zero_();
    } else if (auto* in = dynamic_cast<nn::InstanceNorm3dImpl*>(m)) {
      if (in->weight.defined()) in->weight.fill_(1.0);
      if (in->bias.defined()) in->bias.zero_();
    }
  }
  net->attention_gate()->output_conv()->weight.zero_();
}

int64_t count_parameters(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

int64_t res_conv_block_parameter_count(int64_t in, int64_t out) {
  const int64_t convs = in * out * 27 + out + out * out * 27 + out;
  const int64_t norms = 2 * (2 * out);
  const int64_t projection = in == out ? 0 : in * out + out;
  return convs + norms + projection;
}

int64_t attention_gate_parameter_count(const NetworkConfig& c) {
  const int64_t in = c.channel_widths[0];
  const int64_t hidden = c.attention_hidden_channels;
  return in * hidden * 27 + hidden + 2 * hidden + hidden * c.num_subregions + c.num_subregions;
}

int64_t network_parameter_count(const NetworkConfig& c) {
  const auto& w = c.channel_widths;
  int64_t n = 0;
  int64_t in = c.in_channels;
  for (auto width : w) {
    n += res_conv_block_parameter_count(in, width);
    in = width;
  }
  n += res_conv_block_parameter_count(in, c.bottleneck_channels);
  int64_t below = c.bottleneck_channels;
  for (int level = 3; level >= 0; --level) {
    n += below * w[level] * 8 + w[level];
    n += res_conv_block_parameter_count(2 * w[level], w[level]);
    below = w[level];
  }
  n += w[0] * c.num_classes + c.num_classes;
  n += attention_gate_parameter_count(c);
  return n;
}

}  // namespace segguide
