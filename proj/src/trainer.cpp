#include "segguide/trainer.hpp"

#include "segguide/preprocess.hpp"
#include "segguide/reporting.hpp"
#include "segguide/rng.hpp"

#include <ATen/autocast_mode.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace segguide {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0 || patience <= 0 || crops_per_subject <= 0) {
    throw ValidationError("epochs, batch_size, patience and crops_per_subject must be positive");
  }
  if (patience > epochs) throw ValidationError("patience must not exceed epochs");
  if (!(lr0 > 0.0 && lr_min > 0.0 && lr_min < lr0)) throw ValidationError("need 0 < lr_min < lr0");
  if (weight_decay < 0.0 || !(clip_norm > 0.0)) throw ValidationError("invalid weight decay or clip norm");
  for (auto p : patch) {
    if (p <= 0 || p % kSpatialDivisor != 0) throw ValidationError("patch extents must be multiples of 16");
  }
  if (!(fg_prob >= 0.0 && fg_prob <= 1.0)) throw ValidationError("fg_prob must lie in [0, 1]");
  network.validate();
  loss.validate();
  augmentation.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr0", c.lr0},
       {"lr_min", c.lr_min},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"patience", c.patience},
       {"seed", c.seed},
       {"amp_enabled", c.amp_enabled},
       {"deterministic", c.deterministic},
       {"patch", c.patch},
       {"crops_per_subject", c.crops_per_subject},
       {"fg_prob", c.fg_prob},
       {"augment", c.augment},
       {"adam_betas", {c.adam_beta1, c.adam_beta2}},
       {"adam_eps", c.adam_eps},
       {"network", c.network},
       {"loss", c.loss},
       {"augmentation", c.augmentation}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr0 = j.value("lr0", d.lr0);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.patience = j.value("patience", d.patience);
  c.seed = j.value("seed", d.seed);
  c.amp_enabled = j.value("amp_enabled", d.amp_enabled);
  c.deterministic = j.value("deterministic", d.deterministic);
  c.patch = j.value("patch", d.patch);
  c.crops_per_subject = j.value("crops_per_subject", d.crops_per_subject);
  c.fg_prob = j.value("fg_prob", d.fg_prob);
  c.augment = j.value("augment", d.augment);
  if (j.contains("adam_betas")) {
    const auto b = j.at("adam_betas").get<std::vector<double>>();
    if (b.size() != 2) throw ValidationError("adam_betas must have two entries");
    c.adam_beta1 = b[0];
    c.adam_beta2 = b[1];
  } else {
    c.adam_beta1 = d.adam_beta1;
    c.adam_beta2 = d.adam_beta2;
  }
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.network = j.contains("network") ? j.at("network").get<NetworkConfig>() : d.network;
  c.loss = j.contains("loss") ? j.at("loss").get<LossConfig>() : d.loss;
  c.augmentation = j.contains("augmentation") ? j.at("augmentation").get<AugmentationConfig>() : d.augmentation;
  c.validate();
}

double cosine_lr(int64_t epoch, const TrainConfig& cfg) {
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

double global_grad_norm(const std::vector<torch::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    const auto& g = p.grad();
    if (g.defined()) sq += g.to(torch::kFloat64).square().sum().item<double>();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
  torch::NoGradGuard no_grad;
  const double norm = global_grad_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (p.grad().defined()) p.grad().mul_(factor);
    }
  }
  return norm;
}

LossScaler::LossScaler(bool enabled, double init_scale, double growth_factor, double backoff_factor,
                       int64_t growth_interval)
    : enabled_(enabled),
      scale_(enabled ? init_scale : 1.0),
      growth_factor_(growth_factor),
      backoff_factor_(backoff_factor),
      growth_interval_(growth_interval) {}

torch::Tensor LossScaler::scale(const torch::Tensor& loss) const { return enabled_ ? loss * scale_ : loss; }

bool LossScaler::unscale(const std::vector<torch::Tensor>& params) const {
  torch::NoGradGuard no_grad;
  bool finite = true;
  for (const auto& p : params) {
    auto g = p.grad();
    if (!g.defined()) continue;
    if (enabled_) g.div_(scale_);
    if (finite && !torch::isfinite(g).all().item<bool>()) finite = false;
  }
  return finite;
}

void LossScaler::update(bool found_non_finite) {
  if (!enabled_) return;
  if (found_non_finite) {
    scale_ *= backoff_factor_;
    clean_steps_ = 0;
  } else if (++clean_steps_ >= growth_interval_) {
    scale_ *= growth_factor_;
    clean_steps_ = 0;
  }
}

namespace {

// Reduced-precision forward: bfloat16 autocast on CPU.
class AutocastScope {
 public:
  explicit AutocastScope(bool enabled) : enabled_(enabled) {
    if (!enabled_) return;
    previous_ = at::autocast::is_autocast_enabled(at::kCPU);
    at::autocast::set_autocast_dtype(at::kCPU, at::kBFloat16);
    at::autocast::set_autocast_enabled(at::kCPU, true);
  }
  ~AutocastScope() {
    if (!enabled_) return;
    at::autocast::set_autocast_enabled(at::kCPU, previous_);
    at::autocast::clear_cache();
  }
  AutocastScope(const AutocastScope&) = delete;
  AutocastScope& operator=(const AutocastScope&) = delete;

 private:
  bool enabled_;
  bool previous_ = false;
};

constexpr uint64_t kOrderStream = 0x4f52444552ULL;
constexpr uint64_t kSampleStream = 0x53414d504cULL;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

TrainStats train_epoch(SegGuidedNet& net, const std::vector<Subject>& train, torch::optim::AdamW& optimizer,
                       LossScaler& scaler, const TrainConfig& cfg, int64_t epoch, const StepCallback& on_step) {
  if (train.empty()) throw ValidationError("training set is empty");
  net->train();
  const auto params = net->parameters();

  std::vector<size_t> order;
  for (int64_t r = 0; r < cfg.crops_per_subject; ++r) {
    for (size_t i = 0; i < train.size(); ++i) order.push_back(i);
  }
  Rng order_rng(derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), kOrderStream}));
  order_rng.shuffle(order);

  TrainStats stats;
  int64_t consecutive_bad = 0;
  double loss_sum = 0.0;
  double dice_sum = 0.0;
  int64_t counted = 0;

  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
    const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
    std::vector<torch::Tensor> images;
    std::vector<torch::Tensor> labels;
    for (size_t k = start; k < stop; ++k) {
      const auto& s = train[order[k]];
      Rng rng(derive_seed(cfg.seed, {static_cast<uint64_t>(epoch), static_cast<uint64_t>(k), kSampleStream,
                                     cfg.augmentation.seed}));
      auto patch = tumour_biased_crop(s.volume, s.labels, cfg.patch, cfg.fg_prob, rng);
      if (cfg.augment) patch = augment(patch, cfg.augmentation, rng);
      images.push_back(patch.image);
      labels.push_back(patch.labels);
    }
    const auto x = torch::stack(images);
    const auto target = torch::stack(labels);

    optimizer.zero_grad();
    LossTerms terms;
    {
      AutocastScope autocast(cfg.amp_enabled);
      auto out = net->forward(x);
      out.seg_logits = out.seg_logits.to(torch::kFloat32);
      out.attn_logits = out.attn_logits.to(torch::kFloat32);
      terms = total_loss(out, target, cfg.loss);
    }
    const auto values = terms.values();
    ++stats.steps;
    if (on_step) on_step({epoch + 1, stats.steps, values});

    if (!std::isfinite(values.total)) {
      ++stats.skipped_steps;
      scaler.update(true);
      if (++consecutive_bad > kMaxConsecutiveNonFinite) {
        std::ostringstream os;
        os << "training diverged: " << consecutive_bad << " consecutive non-finite losses at epoch " << epoch + 1
           << ", step " << stats.steps << " (dice=" << values.seg_dice << ", ce=" << values.seg_ce
           << ", attn=" << values.attn_bce << ", loss scale=" << scaler.current_scale() << ")";
        throw TrainingDiverged(os.str());
      }
      continue;
    }
    consecutive_bad = 0;

    scaler.scale(terms.total).backward();
    if (!scaler.unscale(params)) {
      ++stats.skipped_steps;
      scaler.update(true);
      optimizer.zero_grad();
      continue;
    }
    clip_grad_norm(params, cfg.clip_norm);
    optimizer.step();
    scaler.update(false);

    loss_sum += values.total;
    dice_sum += 1.0 - values.seg_dice;
    ++counted;
  }
  if (counted > 0) {
    stats.train_loss = loss_sum / static_cast<double>(counted);
    stats.train_dice = dice_sum / static_cast<double>(counted);
  } else {
    stats.train_loss = std::numeric_limits<double>::quiet_NaN();
    stats.train_dice = 0.0;
  }
  return stats;
}

ValidationResult validate_outputs(const std::vector<NetworkOutput>& outputs, const std::vector<torch::Tensor>& targets,
                                  const LossConfig& cfg) {
  if (outputs.empty()) throw ValidationError("validation set is empty");
  if (outputs.size() != targets.size()) throw ValidationError("outputs and targets differ in count");
  ValidationResult r;
  for (size_t i = 0; i < outputs.size(); ++i) {
    const auto v = total_loss(outputs[i], targets[i], cfg).values();
    r.val_loss += v.total;
    r.val_dice += 1.0 - v.seg_dice;
  }
  r.val_loss /= static_cast<double>(outputs.size());
  r.val_dice /= static_cast<double>(outputs.size());
  return r;
}

ValidationResult validate(SegGuidedNet& net, const std::vector<Subject>& val, const TrainConfig& cfg) {
  if (val.empty()) throw ValidationError("validation set is empty");
  torch::NoGradGuard no_grad;
  const bool was_training = net->is_training();
  net->eval();
  std::vector<NetworkOutput> outputs;
  std::vector<torch::Tensor> targets;
  for (const auto& s : val) {
    auto patch = center_crop(s.volume, s.labels, cfg.patch);
    auto out = net->forward(patch.image.unsqueeze(0));
    outputs.push_back({out.seg_logits.to(torch::kFloat32), out.attn_logits.to(torch::kFloat32)});
    targets.push_back(patch.labels.unsqueeze(0));
  }
  net->train(was_training);
  return validate_outputs(outputs, targets, cfg.loss);
}

void write_epoch_records(const fs::path& path, const std::vector<EpochRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,train_dice,val_dice,lr\n";
  for (const auto& r : records) {
    out << r.epoch << "," << fmt_double(r.train_loss) << "," << fmt_double(r.val_loss) << ","
        << fmt_double(r.train_dice) << "," << fmt_double(r.val_dice) << "," << fmt_double(r.lr) << "\n";
  }
}

std::vector<EpochRecord> read_epoch_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,val_loss,train_dice,val_dice,lr") {
    throw std::runtime_error("unexpected epoch log header in " + path.string());
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw std::runtime_error("malformed epoch log line: " + line);
    out.push_back({std::stoll(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                   std::stod(cells[4]), std::stod(cells[5])});
  }
  return out;
}

std::vector<Subject> normalize_subjects(const std::vector<Subject>& subjects) {
  std::vector<Subject> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back({zscore_normalize(s.volume), s.labels});
  return out;
}

void seed_everything(uint64_t seed, bool deterministic) {
  torch::manual_seed(seed);
  if (deterministic) at::globalContext().setDeterministicAlgorithms(true, false);
}

FitResult fit(SegGuidedNet& net, const std::vector<Subject>& train, const std::vector<Subject>& val,
              const TrainConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  if (!(net->config() == cfg.network)) throw ValidationError("network does not match cfg.network");
  for (const auto& t : train) {
    for (const auto& v : val) {
      if (t.volume.subject_id() == v.volume.subject_id()) {
        throw ValidationError("subject '" + t.volume.subject_id() + "' is in both train and val");
      }
    }
  }
  fs::create_directories(run_dir);
  const std::string config_json = nlohmann::json(cfg).dump(2);
  std::ofstream(run_dir / "config.json") << config_json << "\n";

  seed_everything(cfg.seed, cfg.deterministic);
  initialize_weights(net, cfg.seed);

  torch::optim::AdamW optimizer(net->parameters(), torch::optim::AdamWOptions(cfg.lr0)
                                                       .betas({cfg.adam_beta1, cfg.adam_beta2})
                                                       .eps(cfg.adam_eps)
                                                       .weight_decay(cfg.weight_decay));
  LossScaler scaler(cfg.amp_enabled);

  std::ofstream step_log(run_dir / "log.csv");
  step_log << "epoch,step,total,dice,ce,attn\n";
  const StepCallback log_step = [&step_log](const StepRecord& s) {
    step_log << s.epoch << "," << s.step << "," << fmt_double(s.loss.total) << "," << fmt_double(s.loss.seg_dice)
             << "," << fmt_double(s.loss.seg_ce) << "," << fmt_double(s.loss.attn_bce) << "\n";
  };

  FitResult result;
  result.best_checkpoint = run_dir / "best.ckpt";
  result.last_checkpoint = run_dir / "last.ckpt";
  result.best_val_loss = std::numeric_limits<double>::infinity();
  int64_t since_best = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg);
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    }
    TrainStats stats;
    try {
      stats = train_epoch(net, train, optimizer, scaler, cfg, epoch, log_step);
    } catch (...) {
      step_log.flush();
      write_epoch_records(run_dir / "epochs.csv", result.records);
      throw;
    }
    step_log.flush();
    const auto v = validate(net, val, cfg);
    result.records.push_back({epoch + 1, stats.train_loss, v.val_loss, stats.train_dice, v.val_dice, lr});
    write_epoch_records(run_dir / "epochs.csv", result.records);

    CheckpointMeta meta{cfg.network, cfg.seed, epoch + 1, v.val_loss, config_json};
    save_checkpoint(result.last_checkpoint, net, meta);
    if (v.val_loss < result.best_val_loss) {
      result.best_val_loss = v.val_loss;
      result.best_epoch = epoch + 1;
      save_checkpoint(result.best_checkpoint, net, meta);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.stopped_early = epoch + 1 < cfg.epochs;
      break;
    }
  }
  if (result.records.size() >= 2) plot_training_curves(result.records, run_dir / "curves.png");
  return result;
}

}  // namespace segguide
