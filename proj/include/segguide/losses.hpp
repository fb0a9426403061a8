// Composite objective: soft foreground Dice + cross-entropy + lambda * BCE on
// the attention logits.
#pragma once

#include "segguide/domain.hpp"

#include <nlohmann/json.hpp>

namespace segguide {

struct LossConfig {
  double lambda_attn = 0.1;
  double dice_epsilon = 1e-5;
  double seg_weight = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Scalar values of one loss evaluation.
struct LossBreakdown {
  double total = 0.0;
  double seg_dice = 0.0;
  double seg_ce = 0.0;
  double attn_bce = 0.0;
};

/// Differentiable loss terms (0-dim tensors).
struct LossTerms {
  torch::Tensor total;
  torch::Tensor dice;
  torch::Tensor ce;
  torch::Tensor attn;

  LossBreakdown values() const;
};

/// 1 - mean_{c=1..3} (2 sum p t + eps) / (sum p + sum t + eps), sums taken
/// over every voxel of every batch item. probs: [(B,) 4, D, H, W] with rows
/// summing to 1; target: int64 [(B,) D, H, W]. A class absent from both
/// prediction and target contributes eps / eps = 1.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps = 1e-5);

/// Mean over voxels of -log softmax(logits)[target].
torch::Tensor cross_entropy_loss(const torch::Tensor& seg_logits, const torch::Tensor& target);

/// (1/3) sum_i BCE(attn_logits[:, i], 1[target == i + 1]), voxel-averaged and
/// evaluated in logit space.
torch::Tensor attention_loss(const torch::Tensor& attn_logits, const torch::Tensor& target);

/// Elementwise max(z, 0) - z t + log(1 + exp(-|z|)).
torch::Tensor binary_cross_entropy_with_logits(const torch::Tensor& logits, const torch::Tensor& target);

/// total = seg_weight * (dice + ce) + lambda_attn * attn; logits are promoted
/// to float32 (or kept at float64) before the softmax.
LossTerms total_loss(const NetworkOutput& output, const torch::Tensor& target, const LossConfig& cfg);

}  // namespace segguide
