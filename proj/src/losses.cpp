#include "segguide/losses.hpp"

namespace segguide {

void LossConfig::validate() const {
  if (!(lambda_attn >= 0.0)) throw ValidationError("lambda_attn must be nonnegative");
  if (!(dice_epsilon > 0.0)) throw ValidationError("dice_epsilon must be positive");
  if (!(seg_weight >= 0.0)) throw ValidationError("seg_weight must be nonnegative");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"lambda_attn", c.lambda_attn}, {"dice_epsilon", c.dice_epsilon}, {"seg_weight", c.seg_weight}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  LossConfig d;
  c.lambda_attn = j.value("lambda_attn", d.lambda_attn);
  c.dice_epsilon = j.value("dice_epsilon", d.dice_epsilon);
  c.seg_weight = j.value("seg_weight", d.seg_weight);
  c.validate();
}

LossBreakdown LossTerms::values() const {
  return {total.item<double>(), dice.item<double>(), ce.item<double>(), attn.item<double>()};
}

namespace {

void check_pair(const torch::Tensor& grid, int64_t channels, const torch::Tensor& target, const char* what) {
  const bool batched = grid.dim() == 5;
  if ((grid.dim() != 4 && !batched) || grid.size(batched ? 1 : 0) != channels) {
    throw ValidationError(std::string(what) + ": expected [(B,) " + std::to_string(channels) + ", D, H, W]");
  }
  auto expected = grid.sizes().vec();
  expected.erase(expected.begin() + (batched ? 1 : 0));
  if (target.sizes().vec() != expected) {
    throw ValidationError(std::string(what) + ": target shape does not match prediction");
  }
}

// Promote to a loss dtype: float64 stays, everything else becomes float32.
torch::Tensor loss_dtype(const torch::Tensor& t) {
  return t.scalar_type() == torch::kFloat64 ? t : t.to(torch::kFloat32);
}

int64_t class_dim(const torch::Tensor& t) { return t.dim() == 5 ? 1 : 0; }

}  // namespace

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps) {
  check_pair(probs, kNumClasses, target, "dice_loss");
  const auto cd = class_dim(probs);
  if ((probs.sum(cd) - 1.0).abs().max().item<double>() > 1e-4) {
    throw ValidationError("dice_loss: probabilities must sum to 1 per voxel");
  }
  auto p = loss_dtype(probs);
  auto t = one_hot_classes(target).to(p.scalar_type());
  // Reduce everything except the class axis.
  std::vector<int64_t> dims;
  for (int64_t d = 0; d < p.dim(); ++d) {
    if (d != cd) dims.push_back(d);
  }
  auto inter = (p * t).sum(dims);
  auto denom = p.sum(dims) + t.sum(dims);
  auto score = (2.0 * inter + eps) / (denom + eps);
  return 1.0 - score.slice(0, 1, kNumClasses).mean();
}

torch::Tensor cross_entropy_loss(const torch::Tensor& seg_logits, const torch::Tensor& target) {
  check_pair(seg_logits, kNumClasses, target, "cross_entropy_loss");
  const auto cd = class_dim(seg_logits);
  auto logp = torch::log_softmax(loss_dtype(seg_logits), cd);
  auto picked = logp.gather(cd, target.to(torch::kInt64).unsqueeze(cd));
  return -picked.mean();
}

torch::Tensor binary_cross_entropy_with_logits(const torch::Tensor& logits, const torch::Tensor& target) {
  return torch::clamp_min(logits, 0) - logits * target + torch::log1p(torch::exp(-logits.abs()));
}

torch::Tensor attention_loss(const torch::Tensor& attn_logits, const torch::Tensor& target) {
  check_pair(attn_logits, kNumSubRegions, target, "attention_loss");
  const auto cd = class_dim(attn_logits);
  auto z = loss_dtype(attn_logits);
  // Channels 1..3 of the one-hot encoding are the (NCR, ED, ET) masks.
  auto masks = one_hot_classes(target).to(z.scalar_type()).narrow(cd, 1, kNumSubRegions);
  return segguide::binary_cross_entropy_with_logits(z, masks).mean();
}

LossTerms total_loss(const NetworkOutput& output, const torch::Tensor& target, const LossConfig& cfg) {
  cfg.validate();
  const auto seg = loss_dtype(output.seg_logits);
  LossTerms terms;
  terms.dice = dice_loss(torch::softmax(seg, class_dim(seg)), target, cfg.dice_epsilon);
  terms.ce = segguide::cross_entropy_loss(seg, target);
  terms.attn = attention_loss(output.attn_logits, target);
  terms.total = cfg.seg_weight * (terms.dice + terms.ce) + cfg.lambda_attn * terms.attn;
  return terms;
}

}  // namespace segguide
