// Figure rendering: training curves, qualitative case rows, attention maps
// against ground truth, and failure cases. All functions are read-only over
// their inputs and write lossless PNG files.
#pragma once

#include "segguide/metrics.hpp"
#include "segguide/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace segguide {

/// Three panels: train/val loss, train/val soft Dice, learning rate. The
/// minimum-val-loss epoch is marked. Needs at least two records.
void plot_training_curves(const std::vector<EpochRecord>& records, const std::filesystem::path& out_png);

enum class PanelColumn { kT1ce, kGtOverlay, kPredOverlay, kErrorMap, kAttentionNcr, kAttentionEd, kAttentionEt };
const char* column_title(PanelColumn c);

struct PanelSpec {
  std::string subject_id;
  std::optional<int64_t> slice_index;  // axial (last axis); auto when empty
  std::vector<PanelColumn> columns{PanelColumn::kT1ce, PanelColumn::kGtOverlay, PanelColumn::kPredOverlay,
                                   PanelColumn::kErrorMap, PanelColumn::kAttentionEt};
};

/// Everything needed to draw one subject.
struct CaseView {
  MpMriVolume volume;
  LabelMap ground_truth;
  LabelMap prediction;
  torch::Tensor attention;  // sigmoid maps [3, D, H, W] (NCR, ED, ET); may be undefined
  std::string caption;
};

/// Axial slice with the largest whole-tumour area; lowest index on ties,
/// middle slice when there is no tumour.
int64_t select_axial_slice(const LabelMap& gt);

/// One row per case, columns per spec. Overlay colours: NCR red, ED orange,
/// ET green. Error map: voxels where prediction and ground truth disagree.
/// Attention columns use the hot colour map over [0, 1].
void render_case_panel(const std::vector<PanelSpec>& rows, const std::vector<CaseView>& cases,
                       const std::filesystem::path& out_png);

/// Top row: GT binary masks (NCR, ED, ET); bottom row: attention maps.
void render_attention_panel(const CaseView& view, std::optional<int64_t> slice_index,
                            const std::filesystem::path& out_png);

enum class ExemplarRanking { kMeanCompoundDice, kTcDice };

/// Indices into the case list.
struct Exemplars {
  size_t best = 0;
  size_t median = 0;
  size_t worst = 0;
  std::vector<size_t> failures;  // k lowest, lowest first
};

/// Cases ordered ascending by (score, subject_id); worst is first, best
/// last, median at (n - 1) / 2. Needs at least three cases.
Exemplars select_exemplars(const std::vector<CaseMetrics>& cases, size_t k_worst = 2,
                           ExemplarRanking ranking = ExemplarRanking::kMeanCompoundDice);

struct IndexEntry {
  std::string title;
  std::string file;  // relative to the index page
};

void write_index_page(const std::filesystem::path& out_html, const std::string& title,
                      const std::vector<IndexEntry>& entries);

}  // namespace segguide
