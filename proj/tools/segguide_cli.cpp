// segguide: train / evaluate / report.
#include "segguide/checkpoint.hpp"
#include "segguide/dataset.hpp"
#include "segguide/metrics.hpp"
#include "segguide/phantom.hpp"
#include "segguide/preprocess.hpp"
#include "segguide/reporting.hpp"
#include "segguide/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace segguide;

namespace {

struct DataOptions {
  SplitFractions split;
  Extent3 synthetic_grid{64, 64, 64};
  double synthetic_noise = 0.0;
};

DataOptions data_options(const nlohmann::json& j) {
  DataOptions d;
  if (!j.contains("data")) return d;
  const auto& dj = j.at("data");
  if (dj.contains("split")) {
    const auto f = dj.at("split").get<std::vector<double>>();
    if (f.size() != 3) throw ValidationError("data.split must list train, val and test fractions");
    d.split = {f[0], f[1], f[2]};
  }
  d.synthetic_grid = dj.value("synthetic_grid", d.synthetic_grid);
  d.synthetic_noise = dj.value("synthetic_noise", d.synthetic_noise);
  return d;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

std::vector<Subject> load_split(const DatasetIndex& index, Split split) {
  std::vector<Subject> out;
  for (const auto& e : index.subjects_in(split)) out.push_back(load_subject(e));
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Applies a stored manifest to a freshly scanned index.
DatasetIndex apply_manifest(DatasetIndex index, const std::map<std::string, Split>& manifest) {
  index.split_assignment.clear();
  for (const auto& e : index.subjects) {
    auto it = manifest.find(e.subject_id);
    if (it == manifest.end()) throw ValidationError("subject '" + e.subject_id + "' is not in the split manifest");
    index.split_assignment[e.subject_id] = it->second;
  }
  return index;
}

DatasetIndex index_for_run(const fs::path& data_root, const fs::path& run_dir, const CheckpointMeta& meta,
                           const DataOptions& opts) {
  auto index = scan_dataset(data_root);
  const auto manifest = run_dir / "split_manifest.txt";
  if (fs::exists(manifest)) return apply_manifest(std::move(index), read_split_manifest(manifest));
  return split_dataset(std::move(index), opts.split, meta.seed);
}

int cmd_train(const fs::path& config_path, const fs::path& data_root, int synthetic, std::optional<uint64_t> seed,
              bool no_amp, fs::path run_dir) {
  const auto j = config_path.empty() ? nlohmann::json::object() : read_json(config_path);
  auto cfg = j.get<TrainConfig>();
  const auto opts = data_options(j);
  if (seed) {
    cfg.seed = *seed;
    cfg.augmentation.seed = *seed;
  }
  if (no_amp) cfg.amp_enabled = false;
  cfg.validate();
  if (synthetic > 0) {
    const auto cohort = generate_phantom_cohort(static_cast<size_t>(synthetic), opts.synthetic_grid,
                                                opts.synthetic_noise, cfg.seed);
    for (const auto& s : cohort) write_subject(data_root, s);
    std::cout << "wrote " << cohort.size() << " phantoms to " << data_root << "\n";
  }
  auto index = split_dataset(scan_dataset(data_root), opts.split, cfg.seed);
  fs::create_directories(run_dir);
  write_split_manifest(run_dir / "split_manifest.txt", index);
  nlohmann::json run{{"data_root", fs::absolute(data_root).string()}, {"synthetic", synthetic}};
  std::ofstream(run_dir / "run.json") << run.dump(2) << "\n";

  const auto train = normalize_subjects(load_split(index, Split::kTrain));
  const auto val = normalize_subjects(load_split(index, Split::kVal));
  std::cout << "train " << train.size() << " / val " << val.size() << " / test "
            << index.count(Split::kTest) << " subjects\n";
  SegGuidedNet net(cfg.network);
  const auto result = fit(net, train, val, cfg, run_dir);
  std::cout << "best epoch " << result.best_epoch << " val loss " << result.best_val_loss
            << (result.stopped_early ? " (early stop)" : "") << "\n";
  return 0;
}

int cmd_evaluate(const fs::path& checkpoint, const fs::path& data_root, const std::string& split_name,
                 const fs::path& out_dir) {
  auto [net, meta] = load_network(checkpoint);
  const auto j = nlohmann::json::parse(meta.train_config_json);
  const auto cfg = j.get<TrainConfig>();
  const auto index = index_for_run(data_root, checkpoint.parent_path(), meta, data_options(j));
  const auto subjects = normalize_subjects(load_split(index, split_from_string(split_name)));
  if (subjects.empty()) throw ValidationError("split '" + split_name + "' has no subjects");
  const auto eval = evaluate_cohort(net, subjects, cfg.patch);
  fs::create_directories(out_dir);
  write_case_metrics_csv(out_dir / "metrics_per_case.csv", eval.cases);
  write_summary_csv(out_dir / "summary.csv", eval.summary);
  std::cout << "evaluated " << eval.cases.size() << " subjects; mean Dice (ET, TC, WT) "
            << eval.summary.mean_dice_et_tc_wt << "\n";
  return 0;
}

int cmd_report(const fs::path& run_dir, const std::string& subjects_arg, const std::string& panels_arg,
               fs::path eval_dir, fs::path data_root) {
  static const std::set<std::string> kPanels{"curves", "qualitative", "attention", "failures"};
  const auto panels_list = split_csv(panels_arg);
  std::set<std::string> panels(panels_list.begin(), panels_list.end());
  for (const auto& p : panels) {
    if (!kPanels.count(p)) throw ValidationError("unknown panel '" + p + "'");
  }
  const fs::path out = run_dir / "report";
  fs::create_directories(out);
  std::vector<IndexEntry> entries;

  if (panels.count("curves")) {
    plot_training_curves(read_epoch_records(run_dir / "epochs.csv"), out / "curves.png");
    entries.push_back({"Training curves", "curves.png"});
  }
  const bool need_cases = panels.count("qualitative") || panels.count("attention") || panels.count("failures");
  if (need_cases) {
    if (eval_dir.empty()) eval_dir = run_dir / "eval";
    if (data_root.empty()) data_root = read_json(run_dir / "run.json").at("data_root").get<std::string>();
    const auto ckpt = run_dir / "best.ckpt";
    auto [net, meta] = load_network(ckpt);
    const auto j = nlohmann::json::parse(meta.train_config_json);
    const auto cfg = j.get<TrainConfig>();
    const auto index = index_for_run(data_root, run_dir, meta, data_options(j));
    const auto cases = read_case_metrics_csv(eval_dir / "metrics_per_case.csv");
    std::map<std::string, SubjectEntry> entries_by_id;
    for (const auto& e : index.subjects) entries_by_id[e.subject_id] = e;

    auto view_for = [&](const std::string& id, const std::string& caption) {
      auto it = entries_by_id.find(id);
      if (it == entries_by_id.end()) throw ValidationError("subject '" + id + "' not found under " + data_root.string());
      const auto subject = load_subject(it->second);
      Subject normalized{zscore_normalize(subject.volume), subject.labels};
      auto pred = predict_subject(net, normalized, cfg.patch);
      return CaseView{subject.volume, subject.labels, pred.labels, pred.attention, caption};
    };
    auto dice_caption = [&](const std::string& id) {
      for (const auto& c : cases) {
        if (c.subject_id == id) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "mean Dice %.3f", c.mean_region_dice());
          return std::string(buf);
        }
      }
      return std::string();
    };

    std::vector<std::string> chosen = split_csv(subjects_arg);
    std::vector<std::string> failures;
    if (chosen.empty() || panels.count("failures")) {
      const auto ex = select_exemplars(cases);
      if (chosen.empty()) {
        chosen = {cases[ex.best].subject_id, cases[ex.median].subject_id, cases[ex.worst].subject_id};
      }
      for (auto i : ex.failures) failures.push_back(cases[i].subject_id);
    }
    if (panels.count("qualitative")) {
      std::vector<PanelSpec> rows;
      std::vector<CaseView> views;
      for (const auto& id : chosen) {
        rows.push_back(PanelSpec{id, std::nullopt, PanelSpec{}.columns});
        views.push_back(view_for(id, dice_caption(id)));
      }
      render_case_panel(rows, views, out / "qualitative.png");
      entries.push_back({"Qualitative results", "qualitative.png"});
    }
    if (panels.count("attention")) {
      for (const auto& id : chosen) {
        const auto file = "attention_" + id + ".png";
        render_attention_panel(view_for(id, dice_caption(id)), std::nullopt, out / file);
        entries.push_back({"Attention maps: " + id, file});
      }
    }
    if (panels.count("failures")) {
      std::vector<PanelSpec> rows;
      std::vector<CaseView> views;
      for (const auto& id : failures) {
        rows.push_back(PanelSpec{id, std::nullopt,
                                 {PanelColumn::kT1ce, PanelColumn::kGtOverlay, PanelColumn::kPredOverlay,
                                  PanelColumn::kErrorMap, PanelColumn::kAttentionNcr, PanelColumn::kAttentionEd,
                                  PanelColumn::kAttentionEt}});
        views.push_back(view_for(id, dice_caption(id)));
      }
      render_case_panel(rows, views, out / "failures.png");
      entries.push_back({"Failure cases", "failures.png"});
    }
  }
  write_index_page(out / "index.html", "SegGuidedNet report: " + run_dir.filename().string(), entries);
  std::cout << "wrote " << entries.size() << " panels to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SegGuidedNet: supervised-attention 3D brain tumour segmentation"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train a network; writes a run directory");
  fs::path config_path, data_root, run_dir = "runs/latest";
  int synthetic = 0;
  std::optional<uint64_t> seed;
  bool no_amp = false;
  train->add_option("--config", config_path, "JSON training config (missing keys use defaults)")->check(CLI::ExistingFile);
  train->add_option("--data-root", data_root, "Dataset directory")->required();
  train->add_option("--synthetic", synthetic, "Generate N phantom subjects into --data-root first")->check(CLI::NonNegativeNumber);
  train->add_option("--seed", seed, "Root seed (default 42)");
  train->add_flag("--no-amp", no_amp, "Disable mixed precision");
  train->add_option("--run-dir", run_dir, "Output run directory")->capture_default_str();

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on one split");
  fs::path checkpoint, out_dir;
  std::string split_name = "test";
  evaluate->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data-root", data_root)->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--split", split_name)->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--out", out_dir)->required();

  auto* report = app.add_subcommand("report", "Render figures for a run directory");
  std::string subjects, panels = "curves,qualitative,attention,failures";
  fs::path eval_dir;
  report->add_option("--run-dir", run_dir)->required()->check(CLI::ExistingDirectory);
  report->add_option("--subjects", subjects, "Comma-separated subject ids (default: best, median, worst)");
  report->add_option("--panels", panels, "Comma-separated subset of curves,qualitative,attention,failures");
  report->add_option("--eval-dir", eval_dir, "Directory with metrics_per_case.csv (default <run-dir>/eval)");
  report->add_option("--data-root", data_root, "Dataset directory (default: the one recorded at training)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return cmd_train(config_path, data_root, synthetic, seed, no_amp, run_dir);
    if (evaluate->parsed()) return cmd_evaluate(checkpoint, data_root, split_name, out_dir);
    if (report->parsed()) return cmd_report(run_dir, subjects, panels, eval_dir, data_root);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
