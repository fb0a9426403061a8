// BraTS-style evaluation: DSC, HD95, sensitivity and specificity per compound
// region (ET, TC, WT) plus Dice per direct sub-region (NCR, ED, ET).
#pragma once

#include "segguide/dataset.hpp"
#include "segguide/network.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace segguide {

enum class Region { kET = 0, kTC = 1, kWT = 2 };
inline constexpr std::array<Region, 3> kRegions{Region::kET, Region::kTC, Region::kWT};
const char* region_name(Region r);

/// (2|P ∩ G| + eps) / (|P| + |G| + eps). Two empty masks score 1.
double dsc(const torch::Tensor& pred, const torch::Tensor& gt, double eps = 1e-5);

/// Marks an HD95 that is undefined because exactly one mask is empty. The
/// empty-mask policy later replaces it with the cohort's largest finite value.
inline constexpr double kHd95Undefined = std::numeric_limits<double>::infinity();

/// Boundary voxels: foreground with at least one 6-connected background
/// neighbour, or lying on the grid boundary.
torch::Tensor surface_voxels(const torch::Tensor& mask);

/// Squared Euclidean distance (mm^2) from every voxel to the nearest voxel of
/// `features`, exact separable transform. Infinity when features is empty.
std::vector<double> squared_distance_transform(const torch::Tensor& features, const Spacing3& spacing_mm);

/// Linear interpolation between order statistics at rank q (n - 1).
double percentile(std::vector<double> values, double q);

/// max(perc95(d_{P->G}), perc95(d_{G->P})) over surface-to-surface distances
/// in mm. Both masks empty: 0. Exactly one empty: kHd95Undefined.
double hd95(const torch::Tensor& pred, const torch::Tensor& gt, const Spacing3& spacing_mm = {1.0, 1.0, 1.0});

struct SensSpec {
  double sensitivity = 1.0;
  double specificity = 1.0;
};

/// TP / (TP + FN) and TN / (TN + FP); a zero denominator yields 1.
SensSpec sensitivity_specificity(const torch::Tensor& pred, const torch::Tensor& gt);

/// Replaces undefined entries with the largest finite value. Throws if no
/// finite value exists but some entry is undefined.
std::vector<double> apply_empty_policy(std::span<const double> hd95_values);

struct RegionMetrics {
  double dice = 0.0;
  double hd95_mm = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

struct CaseMetrics {
  std::string subject_id;
  std::array<RegionMetrics, 3> regions{};   // ET, TC, WT
  std::array<double, 3> subregion_dice{};   // NCR, ED, ET

  double mean_region_dice() const;
};

CaseMetrics evaluate_case(const std::string& subject_id, const LabelMap& pred, const LabelMap& gt,
                          const Spacing3& spacing_mm = {1.0, 1.0, 1.0});

/// Second cohort pass: per region, apply_empty_policy over all cases.
void apply_empty_policy(std::vector<CaseMetrics>& cases);

struct SummaryStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for a single case
  double median = 0.0;
};

SummaryStats summarize(std::span<const double> values);

struct CohortSummary {
  size_t n_cases = 0;
  // [region][metric]; metric order: dice, hd95_mm, sensitivity, specificity
  std::array<std::array<SummaryStats, 4>, 3> regions{};
  std::array<SummaryStats, 3> subregion_dice{};  // NCR, ED, ET
  double mean_dice_et_tc_wt = 0.0;
};

CohortSummary summarize_cohort(const std::vector<CaseMetrics>& cases);

struct CohortEvaluation {
  std::vector<CaseMetrics> cases;  // in test-set order
  CohortSummary summary;
};

/// Scores precomputed label maps. Throws naming any subject without a
/// prediction.
CohortEvaluation evaluate_predictions(const std::map<std::string, LabelMap>& predictions,
                                      const std::vector<Subject>& test_set);

struct Prediction {
  LabelMap labels;
  torch::Tensor attention;  // sigmoid of the attention logits, [3, D, H, W]
};

/// Eval-mode inference on the centre crop; outside the crop the prediction
/// is background and the attention is 0. No sliding window.
Prediction predict_subject(SegGuidedNet& net, const Subject& subject, const Extent3& patch);

CohortEvaluation evaluate_cohort(SegGuidedNet& net, const std::vector<Subject>& test_set, const Extent3& patch);

inline constexpr int kMetricsSchemaVersion = 1;

void write_case_metrics_csv(const std::filesystem::path& path, const std::vector<CaseMetrics>& cases);
std::vector<CaseMetrics> read_case_metrics_csv(const std::filesystem::path& path);
void write_summary_csv(const std::filesystem::path& path, const CohortSummary& summary);

}  // namespace segguide
