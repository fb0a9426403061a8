// Acceptance criteria 1-8. Prints one PASS/FAIL line per criterion; exits
// nonzero if any criterion fails.
#include "oracles.hpp"
#include "segguide/checkpoint.hpp"
#include "segguide/dataset.hpp"
#include "segguide/losses.hpp"
#include "segguide/metrics.hpp"
#include "segguide/network.hpp"
#include "segguide/phantom.hpp"
#include "segguide/preprocess.hpp"
#include "segguide/rng.hpp"
#include "segguide/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

using namespace segguide;
namespace fs = std::filesystem;

namespace {

// Desk-scale optimiser settings; see README.
constexpr double kDeskLr0 = 1e-2;
constexpr int64_t kDeskBatch = 1;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- 1
Outcome architecture() {
  Outcome o;
  {
    // Full-size forward; inference mode keeps the peak under ~3 GB.
    SegGuidedNet net;
    initialize_weights(net, 42);
    net->eval();
    c10::InferenceMode g;
    const auto t = std::chrono::steady_clock::now();
    const auto out = net->forward(torch::randn({2, 4, 128, 128, 128}));
    o.check(out.seg_logits.sizes() == torch::IntArrayRef({2, 4, 128, 128, 128}), "seg_logits (2,4,128^3)");
    o.check(out.attn_logits.sizes() == torch::IntArrayRef({2, 3, 128, 128, 128}),
            "attn_logits (2,3,128^3), forward took " + fmt("%.1f s", seconds_since(t)));
  }
  const auto t0 = std::chrono::steady_clock::now();
  {
    SegGuidedNet net;
    initialize_weights(net, 42);
    net->eval();
    torch::NoGradGuard g;
    const auto out = net->forward(torch::randn({2, 4, 32, 32, 32}));
    o.check(out.seg_logits.sizes() == torch::IntArrayRef({2, 4, 32, 32, 32}) &&
                out.attn_logits.sizes() == torch::IntArrayRef({2, 3, 32, 32, 32}),
            "forward at (2,4,32^3) with the default widths");
  }
  SegGuidedNet net;
  const auto total = count_parameters(*net);
  const auto gate = count_parameters(*net->attention_gate());
  o.check(total == network_parameter_count(NetworkConfig{}), "parameter count equals closed form: " +
                                                                  std::to_string(total));
  o.check(total >= 7'000'000 && total <= 8'600'000, "total parameters " + std::to_string(total) +
                                                         " within [7.0M, 8.6M]");
  o.check(gate == 32 * 16 * 27 + 16 + 2 * 16 + 16 * 3 + 3, "gate parameters " + std::to_string(gate) +
                                                              " equal 32*16*27+16 + 2*16 + 16*3+3");
  o.check(gate == 13939, "gate parameters equal the stated 13,939");
  o.check(static_cast<double>(gate) / static_cast<double>(total) < 0.002,
          "gate/total = " + fmt("%.5f", static_cast<double>(gate) / static_cast<double>(total)) + " < 0.002");
  const double secs = seconds_since(t0);
  o.check(secs < 60.0, "32^3 shape checks took " + fmt("%.1f s", secs));
  return o;
}

// ---------------------------------------------------------------- 2
Outcome loss_correctness() {
  Outcome o;
  std::mt19937_64 gen(42);
  std::uniform_int_distribution<int64_t> lab(0, 3);
  torch::manual_seed(42);
  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto target = torch::empty({2, 6, 6, 6}, torch::kInt64);
    auto* p = target.data_ptr<int64_t>();
    for (int64_t i = 0; i < target.numel(); ++i) p[i] = lab(gen);
    const auto seg = 4.0 * torch::randn({2, 4, 6, 6, 6}, f64);
    const auto attn = 4.0 * torch::randn({2, 3, 6, 6, 6}, f64);
    const auto probs = torch::softmax(seg, 1);
    auto rel = [](double a, double b) { return std::abs(a - b) / std::abs(b); };
    worst = std::max({worst, rel(dice_loss(probs, target).item<double>(), oracle::dice_loss(probs, target, 1e-5)),
                      rel(segguide::cross_entropy_loss(seg, target).item<double>(), oracle::cross_entropy(seg, target)),
                      rel(attention_loss(attn, target).item<double>(), oracle::attention_loss(attn, target))});
  }
  o.check(worst < 1e-9, "worst relative error vs brute force over 50 random 6^3 cases: " + fmt("%.2e", worst));
  auto target = torch::randint(0, 4, {6, 6, 6}, torch::kInt64);
  const double ce = segguide::cross_entropy_loss(torch::zeros({4, 6, 6, 6}, f64), target).item<double>();
  const double bce = attention_loss(torch::zeros({3, 6, 6, 6}, f64), target).item<double>();
  o.check(std::abs(ce - std::log(4.0)) / std::log(4.0) < 1e-9, "uniform-logit CE = ln 4 (" + fmt("%.12f", ce) + ")");
  o.check(std::abs(bce - std::log(2.0)) / std::log(2.0) < 1e-9, "zero-logit BCE = ln 2 (" + fmt("%.12f", bce) + ")");
  return o;
}

// ---------------------------------------------------------------- 3
Outcome gradient_check() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  SegGuidedNet net(NetworkConfig::with_base_channels(2));
  initialize_weights(net, 42);
  net->to(torch::kFloat64);
  net->eval();
  {
    // Give the gate head nonzero weights so its path is exercised too.
    torch::NoGradGuard g;
    auto& head = net->attention_gate()->output_conv()->weight;
    head.normal_(0.0, kaiming_std(head, net->config().leaky_slope), Rng(7).torch_generator());
  }
  torch::manual_seed(42);
  // 16^3 is the smallest extent four poolings accept, but its 1^3 bottleneck
  // makes instance norm constant; 32^3 keeps every path live.
  const int64_t s = 32;
  const auto x = torch::randn({1, 4, s, s, s}, torch::kFloat64);
  const auto target = torch::randint(0, 4, {1, s, s, s}, torch::kInt64);
  const LossConfig cfg;
  auto loss = [&] { return total_loss(net->forward(x), target, cfg).total; };

  net->zero_grad();
  loss().backward();
  auto params = net->parameters();
  std::vector<int64_t> sizes;
  int64_t n_total = 0;
  for (const auto& p : params) {
    sizes.push_back(p.numel());
    n_total += p.numel();
  }
  std::mt19937_64 gen(42);
  std::uniform_int_distribution<int64_t> pick(0, n_total - 1);
  const double h = 1e-4;
  int good = 0, nonzero = 0;
  const int samples = 200;
  torch::NoGradGuard no_grad;
  for (int i = 0; i < samples; ++i) {
    int64_t flat = pick(gen);
    size_t k = 0;
    while (flat >= sizes[k]) flat -= sizes[k++];
    auto w = params[k].view(-1);
    const double orig = w[flat].item<double>();
    const double analytic = params[k].grad().view(-1)[flat].item<double>();
    w[flat] = orig + h;
    const double up = loss().item<double>();
    w[flat] = orig - h;
    const double down = loss().item<double>();
    w[flat] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    nonzero += scale > 1e-8;
    if (std::abs(analytic - numeric) <= 1e-3 * scale || std::abs(analytic - numeric) < 1e-10) {
      ++good;
      continue;
    }
    // Diagnose the miss: does a smaller step converge to the analytic value?
    w[flat] = orig + 1e-6;
    const double up_fine = loss().item<double>();
    w[flat] = orig - 1e-6;
    const double down_fine = loss().item<double>();
    w[flat] = orig;
    const double fine = (up_fine - down_fine) / 2e-6;
    o.notes.push_back("info miss " + net->named_parameters().keys()[k] + "[" + std::to_string(flat) +
                      "]: analytic " + fmt("%.6e", analytic) + ", h=1e-4 " + fmt("%.6e", numeric) + ", h=1e-6 " +
                      fmt("%.6e", fine));
  }
  const double frac = static_cast<double>(good) / samples;
  o.check(frac >= 0.99, std::to_string(good) + "/" + std::to_string(samples) +
                            " coordinates within 1e-3 relative (base_channels=2, 32^3, float64, h=1e-4); " +
                            std::to_string(nonzero) + " with |gradient| > 1e-8");
  const double secs = seconds_since(t0);
  o.check(secs < 300.0, "took " + fmt("%.1f s", secs));
  return o;
}

// ---------------------------------------------------------------- 4
Outcome metric_oracle() {
  Outcome o;
  std::mt19937_64 gen(42);
  std::uniform_int_distribution<int64_t> size(1, 12);
  std::uniform_real_distribution<double> density(0.02, 0.7);
  std::uniform_real_distribution<double> spacing(0.5, 2.0);
  double worst = 0.0;
  int mismatched_inf = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t x = size(gen), y = size(gen), z = size(gen);
    auto mask = [&](double p) {
      std::bernoulli_distribution b(p);
      auto t = torch::empty({x, y, z}, torch::kBool);
      auto* q = t.data_ptr<bool>();
      for (int64_t i = 0; i < t.numel(); ++i) q[i] = b(gen);
      return t;
    };
    const auto pm = mask(density(gen));
    const auto gm = mask(density(gen));
    const Spacing3 sp = trial % 2 ? Spacing3{1.0, 1.0, 1.0} : Spacing3{spacing(gen), spacing(gen), spacing(gen)};
    const double want = oracle::hd95(pm, gm, sp);
    const double got = hd95(pm, gm, sp);
    if (std::isinf(want) || std::isinf(got)) {
      mismatched_inf += std::isinf(want) != std::isinf(got);
    } else {
      worst = std::max(worst, std::abs(got - want));
    }
  }
  o.check(worst <= 1e-9 && mismatched_inf == 0,
          "hd95 vs all-pairs brute force on 200 random masks up to 12^3: max abs diff " + fmt("%.2e", worst));
  auto m = [](std::initializer_list<int> idx) {
    auto t = torch::zeros({16}, torch::kBool);
    for (int i : idx) t[i] = true;
    return t.reshape({2, 2, 4});
  };
  const double eps = 1e-5;
  const double d = dsc(m({0, 1, 2, 3, 4, 5}), m({0, 1, 2, 6}));
  o.check(d == (6.0 + eps) / (10.0 + eps), "dsc(|P|=6, |G|=4, |P and G|=3) = " + fmt("%.8f", d));
  const std::vector<double> raw{2.0, 5.0, kHd95Undefined, 9.0};
  const auto fixed = apply_empty_policy(std::span<const double>(raw));
  o.check(fixed[2] == 9.0, "empty-mask case assigned the cohort max finite HD95 (9)");
  return o;
}

// ---------------------------------------------------------------- desk runs
struct DeskRun {
  FitResult fit;
  fs::path dir;
  double seconds = 0.0;
};

TrainConfig desk_config(double lambda) {
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.patience = 200;
  cfg.batch_size = kDeskBatch;
  cfg.seed = 42;
  cfg.patch = {64, 64, 64};
  cfg.network = NetworkConfig::with_base_channels(8);
  cfg.loss.lambda_attn = lambda;
  cfg.augment = false;
  cfg.amp_enabled = false;
  cfg.lr0 = kDeskLr0;
  cfg.lr_min = 1e-6;
  return cfg;
}

std::vector<Subject> desk_phantoms() {
  return normalize_subjects(generate_phantom_cohort(8, {64, 64, 64}, 0.0, 42));
}

// The overfit check validates on the training phantoms themselves; copies
// under distinct ids keep fit's train/val disjointness check meaningful.
std::vector<Subject> as_validation_copies(const std::vector<Subject>& subjects) {
  std::vector<Subject> out;
  for (const auto& s : subjects) {
    out.push_back({MpMriVolume(s.volume.channels(), s.volume.brain_mask(), s.volume.subject_id() + "_val",
                               s.volume.voxel_spacing_mm()),
                   s.labels});
  }
  return out;
}

DeskRun desk_run(const fs::path& dir, double lambda, bool reuse) {
  DeskRun r;
  r.dir = dir;
  const auto cfg = desk_config(lambda);
  if (reuse && fs::exists(dir / "epochs.csv") && fs::exists(dir / "best.ckpt")) {
    r.fit.records = read_epoch_records(dir / "epochs.csv");
    if (static_cast<int64_t>(r.fit.records.size()) == cfg.epochs) {
      r.fit.best_checkpoint = dir / "best.ckpt";
      r.fit.last_checkpoint = dir / "last.ckpt";
      const auto meta = read_checkpoint_meta(r.fit.best_checkpoint);
      r.fit.best_epoch = meta.epoch;
      r.fit.best_val_loss = meta.val_loss;
      std::cout << "  reusing " << dir << "\n";
      return r;
    }
  }
  fs::remove_all(dir);
  const auto train = desk_phantoms();
  const auto val = as_validation_copies(train);
  SegGuidedNet net(cfg.network);
  const auto t0 = std::chrono::steady_clock::now();
  r.fit = fit(net, train, val, cfg, dir);
  r.seconds = seconds_since(t0);
  std::cout << "  trained " << dir.filename() << " in " << fmt("%.0f s", r.seconds) << std::endl;
  return r;
}

// ---------------------------------------------------------------- 5
Outcome overfit(const DeskRun& run) {
  Outcome o;
  double best_dice = 0.0;
  for (const auto& rec : run.fit.records) best_dice = std::max(best_dice, rec.val_dice);
  o.check(best_dice > 0.90, "best validation soft Dice " + fmt("%.4f", best_dice) + " > 0.90");
  auto [net, meta] = load_network(run.fit.best_checkpoint);
  const auto subjects = desk_phantoms();
  const auto ev = evaluate_cohort(net, subjects, {64, 64, 64});
  for (size_t r = 0; r < 3; ++r) {
    const auto& stats = ev.summary.regions[r];
    o.check(stats[0].mean > 0.85, std::string(region_name(kRegions[r])) + " Dice " + fmt("%.4f", stats[0].mean) +
                                      " > 0.85");
    o.check(stats[1].mean < 3.0, std::string(region_name(kRegions[r])) + " HD95 " + fmt("%.3f mm", stats[1].mean) +
                                     " < 3 mm");
  }
  if (run.seconds > 0.0) o.check(run.seconds < 4 * 3600.0, "run took " + fmt("%.0f s", run.seconds) + " < 4 h");
  return o;
}

// Pooled soft overlap 2 sum(A G) / (sum A + sum G) per sub-region and the
// attention BCE over the phantoms, from the best checkpoint.
struct AttentionStats {
  std::array<double, 3> overlap{};
  double bce = 0.0;
};

AttentionStats attention_stats(const fs::path& checkpoint) {
  auto [net, meta] = load_network(checkpoint);
  net->eval();
  torch::NoGradGuard g;
  std::array<double, 3> inter{}, sum_a{}, sum_g{};
  double bce = 0.0;
  const auto subjects = desk_phantoms();
  for (const auto& s : subjects) {
    const auto out = net->forward(s.volume.channels().unsqueeze(0));
    const auto a = torch::sigmoid(out.attn_logits[0]).to(torch::kFloat64);
    const auto gt = one_hot_classes(s.labels.labels()).narrow(0, 1, 3).to(torch::kFloat64);
    for (int64_t i = 0; i < 3; ++i) {
      inter[i] += (a[i] * gt[i]).sum().item<double>();
      sum_a[i] += a[i].sum().item<double>();
      sum_g[i] += gt[i].sum().item<double>();
    }
    bce += attention_loss(out.attn_logits.to(torch::kFloat64), s.labels.labels().unsqueeze(0)).item<double>();
  }
  AttentionStats st;
  for (int i = 0; i < 3; ++i) st.overlap[i] = 2.0 * inter[i] / (sum_a[i] + sum_g[i]);
  st.bce = bce / static_cast<double>(subjects.size());
  return st;
}

// ---------------------------------------------------------------- 6
Outcome attention_effect(const DeskRun& supervised, const DeskRun& ablation) {
  Outcome o;
  const auto sup = attention_stats(supervised.fit.best_checkpoint);
  const std::array<const char*, 3> names{"NCR", "ED", "ET"};
  for (int i : {0, 2}) {
    o.check(sup.overlap[i] > 0.8, std::string("lambda=0.1 ") + names[i] + " soft overlap " +
                                      fmt("%.4f", sup.overlap[i]) + " > 0.8");
  }
  o.notes.push_back("info lambda=0.1 ED soft overlap " + fmt("%.4f", sup.overlap[1]) + ", attention BCE " +
                    fmt("%.5f", sup.bce));
  const auto abl = attention_stats(ablation.fit.best_checkpoint);
  o.check(std::abs(abl.bce - std::log(2.0)) <= 0.05,
          "lambda=0 attention BCE " + fmt("%.6f", abl.bce) + " within ln 2 +/- 0.05");
  return o;
}

// ---------------------------------------------------------------- 7
Outcome determinism(const DeskRun& a, const DeskRun& b) {
  Outcome o;
  const auto ea = slurp(a.dir / "epochs.csv");
  const auto eb = slurp(b.dir / "epochs.csv");
  o.check(!ea.empty() && ea == eb, "two seed-42 runs wrote byte-identical epochs.csv (" +
                                       std::to_string(a.fit.records.size()) + " epochs)");
  DatasetIndex index;
  for (int i = 0; i < 1251; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "BraTS2021_%05d", i);
    index.subjects.push_back({id, {}, {}});
  }
  const auto split = split_dataset(index, {}, 42);
  const auto n_train = split.count(Split::kTrain), n_val = split.count(Split::kVal), n_test = split.count(Split::kTest);
  o.check(n_train == 875 && n_val == 125 && n_test == 251, "1251 ids split " + std::to_string(n_train) + "/" +
                                                                std::to_string(n_val) + "/" + std::to_string(n_test));
  return o;
}

// ---------------------------------------------------------------- 8
Outcome schedule_and_clipping() {
  Outcome o;
  TrainConfig cfg;
  const double start = cosine_lr(0, cfg), end = cosine_lr(cfg.epochs, cfg), mid = cosine_lr(cfg.epochs / 2, cfg);
  o.check(std::abs(start - 1e-4) <= 1e-12 && std::abs(end - 1e-6) <= 1e-12,
          "cosine_lr endpoints " + fmt("%.3e", start) + ", " + fmt("%.3e", end));
  o.check(std::abs(mid - 5.05e-5) <= 1e-12, "cosine_lr midpoint " + fmt("%.6e", mid));
  torch::manual_seed(42);
  std::vector<torch::Tensor> params;
  for (int i = 0; i < 5; ++i) {
    auto p = torch::zeros({7, 3}, torch::requires_grad());
    p.mutable_grad() = torch::randn({7, 3});
    params.push_back(p);
  }
  const double n0 = global_grad_norm(params);
  for (auto& p : params) p.mutable_grad().mul_(10.0 / n0);
  clip_grad_norm(params, 1.0);
  const double after = global_grad_norm(params);
  o.check(std::abs(after - 1.0) <= 1e-6, "gradient of norm 10 clipped to " + fmt("%.9f", after));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SegGuidedNet acceptance criteria"};
  fs::path work_dir = "acceptance_runs";
  bool reuse = false;
  bool skip_training = false;
  app.add_option("--work-dir", work_dir, "Directory for the desk-scale runs");
  app.add_flag("--reuse", reuse, "Reuse completed desk runs found in --work-dir");
  app.add_flag("--skip-training", skip_training, "Only run criteria that need no training (1-4, 8)");
  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(1);

  int failures = 0;
  auto report = [&](int id, const std::string& title, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << title << std::endl;
    for (const auto& n : o.notes) std::cout << "        " << n << "\n";
    std::cout.flush();
    failures += !o.pass;
  };

  report(1, "architecture contract", architecture());
  report(2, "loss correctness", loss_correctness());
  report(3, "gradient check", gradient_check());
  report(4, "metric oracle", metric_oracle());
  report(8, "schedule and clipping", schedule_and_clipping());
  if (!skip_training) {
    fs::create_directories(work_dir);
    std::cout << "desk-scale runs (8 phantoms, 64^3, 200 epochs, batch 1, base_channels 8) in " << work_dir << std::endl;
    const auto a = desk_run(work_dir / "lambda0.1_a", 0.1, reuse);
    const auto b = desk_run(work_dir / "lambda0.1_b", 0.1, reuse);
    const auto c = desk_run(work_dir / "lambda0", 0.0, reuse);
    report(5, "desk-scale overfit", overfit(a));
    report(6, "attention supervision effect", attention_effect(a, c));
    report(7, "determinism", determinism(a, b));
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
