// Training loop: AdamW, per-epoch cosine annealing, global-norm clipping,
// optional mixed precision with dynamic loss scaling, early stopping on the
// validation loss, checkpointing and deterministic seeding.
#pragma once

#include "segguide/augment.hpp"
#include "segguide/checkpoint.hpp"
#include "segguide/dataset.hpp"
#include "segguide/losses.hpp"
#include "segguide/network.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

namespace segguide {

struct TrainConfig {
  int64_t epochs = 50;
  int64_t batch_size = 2;
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  int64_t patience = 20;
  uint64_t seed = 42;
  bool amp_enabled = true;
  bool deterministic = true;
  Extent3 patch{128, 128, 128};
  int64_t crops_per_subject = 1;
  double fg_prob = 0.8;
  bool augment = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  NetworkConfig network;
  LossConfig loss;
  AugmentationConfig augmentation;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Table-4 style record. epoch is 1-based; lr is the rate used in that epoch.
struct EpochRecord {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_dice = 0.0;
  double val_dice = 0.0;
  double lr = 0.0;
};

struct StepRecord {
  int64_t epoch = 0;
  int64_t step = 0;
  LossBreakdown loss;
};
using StepCallback = std::function<void(const StepRecord&)>;

/// lr_min + (lr0 - lr_min) (1 + cos(pi epoch / epochs)) / 2 for a 0-based epoch.
double cosine_lr(int64_t epoch, const TrainConfig& cfg);

/// Global L2 norm over all defined gradients.
double global_grad_norm(const std::vector<torch::Tensor>& params);

/// Rescales gradients so their global norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);

/// Dynamic loss scaling. Disabled scalers use scale 1 but still reject steps
/// with non-finite gradients.
class LossScaler {
 public:
  explicit LossScaler(bool enabled, double init_scale = 65536.0, double growth_factor = 2.0,
                      double backoff_factor = 0.5, int64_t growth_interval = 2000);

  torch::Tensor scale(const torch::Tensor& loss) const;
  /// Divides gradients by the scale; returns false if any is non-finite.
  bool unscale(const std::vector<torch::Tensor>& params) const;
  /// Backs off after an overflow, grows after growth_interval clean steps.
  void update(bool found_non_finite);
  double current_scale() const { return scale_; }
  bool enabled() const { return enabled_; }

 private:
  bool enabled_;
  double scale_;
  double growth_factor_;
  double backoff_factor_;
  int64_t growth_interval_;
  int64_t clean_steps_ = 0;
};

/// Aborts training after too many consecutive non-finite losses.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
inline constexpr int64_t kMaxConsecutiveNonFinite = 10;

struct TrainStats {
  double train_loss = 0.0;
  double train_dice = 0.0;
  int64_t steps = 0;
  int64_t skipped_steps = 0;
};

/// Subjects must already be z-score normalised. Crop and augmentation draws
/// come from per-sample streams derive_seed(seed, {epoch, sample, aug seed}).
TrainStats train_epoch(SegGuidedNet& net, const std::vector<Subject>& train, torch::optim::AdamW& optimizer,
                       LossScaler& scaler, const TrainConfig& cfg, int64_t epoch, const StepCallback& on_step = {});

struct ValidationResult {
  double val_loss = 0.0;
  double val_dice = 0.0;  // mean of 1 - dice_loss over subjects
};

/// Eval mode, centre crops, one subject per forward pass.
ValidationResult validate(SegGuidedNet& net, const std::vector<Subject>& val, const TrainConfig& cfg);

/// Loss and soft Dice for externally supplied logits, one entry per subject.
ValidationResult validate_outputs(const std::vector<NetworkOutput>& outputs, const std::vector<torch::Tensor>& targets,
                                  const LossConfig& cfg);

struct FitResult {
  std::vector<EpochRecord> records;
  int64_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  bool stopped_early = false;
};

/// Initialises `net` from cfg.seed and trains it. Only training and
/// validation subjects are passed in, so the test split is never touched.
/// Writes config.json, log.csv (per step), epochs.csv, curves.png, best.ckpt
/// and last.ckpt into run_dir.
FitResult fit(SegGuidedNet& net, const std::vector<Subject>& train, const std::vector<Subject>& val,
              const TrainConfig& cfg, const std::filesystem::path& run_dir);

void write_epoch_records(const std::filesystem::path& path, const std::vector<EpochRecord>& records);
std::vector<EpochRecord> read_epoch_records(const std::filesystem::path& path);

/// z-score normalises every subject.
std::vector<Subject> normalize_subjects(const std::vector<Subject>& subjects);

/// Sets the global torch seed and, when requested, deterministic kernels.
void seed_everything(uint64_t seed, bool deterministic);

}  // namespace segguide
