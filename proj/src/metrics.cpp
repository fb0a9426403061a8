#include "segguide/metrics.hpp"

#include "segguide/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace segguide {

namespace fs = std::filesystem;

const char* region_name(Region r) {
  switch (r) {
    case Region::kET: return "ET";
    case Region::kTC: return "TC";
    case Region::kWT: return "WT";
  }
  return "?";
}

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ValidationError(std::string(what) + ": mask shapes differ");
}

std::vector<uint8_t> to_bytes(const torch::Tensor& mask) {
  auto t = mask.to(torch::kBool).to(torch::kUInt8).contiguous();
  return std::vector<uint8_t>(t.data_ptr<uint8_t>(), t.data_ptr<uint8_t>() + t.numel());
}

// 1D lower envelope of parabolas (w (p - q))^2 + f(q), in place over a
// strided line of n samples.
void edt_line(double* f, int64_t n, int64_t stride, double w, std::vector<double>& g, std::vector<int64_t>& v,
              std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < n; ++i) g[i] = f[i * stride];
  auto pos = [w](int64_t q) { return w * static_cast<double>(q); };
  auto intersect = [&](int64_t a, int64_t b) {
    const double xa = pos(a);
    const double xb = pos(b);
    return ((g[b] + xb * xb) - (g[a] + xa * xa)) / (2.0 * (xb - xa));
  };
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (g[q] == inf) continue;
    while (k >= 0 && intersect(v[k], q) <= z[k]) --k;
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -inf : intersect(v[k - 1], q);
    z[k + 1] = inf;
  }
  if (k < 0) return;  // no finite samples on this line
  int64_t j = 0;
  for (int64_t p = 0; p < n; ++p) {
    const double xp = pos(p);
    while (z[j + 1] < xp) ++j;
    const double d = xp - pos(v[j]);
    f[p * stride] = d * d + g[v[j]];
  }
}

}  // namespace

double dsc(const torch::Tensor& pred, const torch::Tensor& gt, double eps) {
  check_same_shape(pred, gt, "dsc");
  const auto p = pred.to(torch::kBool);
  const auto g = gt.to(torch::kBool);
  const double inter = static_cast<double>(p.logical_and(g).sum().item<int64_t>());
  const double sp = static_cast<double>(p.sum().item<int64_t>());
  const double sg = static_cast<double>(g.sum().item<int64_t>());
  return (2.0 * inter + eps) / (sp + sg + eps);
}

torch::Tensor surface_voxels(const torch::Tensor& mask) {
  if (mask.dim() != 3) throw ValidationError("surface_voxels expects a 3D mask");
  const auto m = mask.to(torch::kBool);
  // Pad with background so grid-boundary voxels count as surface.
  auto padded = torch::constant_pad_nd(m.to(torch::kUInt8), {1, 1, 1, 1, 1, 1}, 0).to(torch::kBool);
  using torch::indexing::Slice;
  const auto c = Slice(1, -1);
  auto interior = m.clone();
  for (int axis = 0; axis < 3; ++axis) {
    for (int side : {0, 2}) {
      std::array<torch::indexing::TensorIndex, 3> idx{c, c, c};
      idx[axis] = side == 0 ? Slice(0, -2) : Slice(2, torch::indexing::None);
      interior = interior.logical_and(padded.index({idx[0], idx[1], idx[2]}));
    }
  }
  return m.logical_and(interior.logical_not());
}

std::vector<double> squared_distance_transform(const torch::Tensor& features, const Spacing3& spacing) {
  const auto e = spatial_extent(features);
  const auto bytes = to_bytes(features);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) d[i] = bytes[i] ? 0.0 : inf;
  if (std::none_of(bytes.begin(), bytes.end(), [](uint8_t b) { return b != 0; })) return d;

  const int64_t n_max = std::max({e[0], e[1], e[2]});
  std::vector<double> g(static_cast<size_t>(n_max));
  std::vector<int64_t> v(static_cast<size_t>(n_max));
  std::vector<double> z(static_cast<size_t>(n_max + 1));
  const std::array<int64_t, 3> strides{e[1] * e[2], e[2], 1};
  for (int axis = 2; axis >= 0; --axis) {
    const int a1 = (axis + 1) % 3;
    const int a2 = (axis + 2) % 3;
    for (int64_t i = 0; i < e[a1]; ++i) {
      for (int64_t j = 0; j < e[a2]; ++j) {
        double* line = d.data() + i * strides[a1] + j * strides[a2];
        edt_line(line, e[axis], strides[axis], spacing[axis], g, v, z);
      }
    }
  }
  return d;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double hd95(const torch::Tensor& pred, const torch::Tensor& gt, const Spacing3& spacing) {
  check_same_shape(pred, gt, "hd95");
  const bool p_empty = !pred.to(torch::kBool).any().item<bool>();
  const bool g_empty = !gt.to(torch::kBool).any().item<bool>();
  if (p_empty && g_empty) return 0.0;
  if (p_empty || g_empty) return kHd95Undefined;

  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  const auto dist_to_g = squared_distance_transform(sg, spacing);
  const auto dist_to_p = squared_distance_transform(sp, spacing);
  const auto sp_bytes = to_bytes(sp);
  const auto sg_bytes = to_bytes(sg);
  std::vector<double> p_to_g;
  std::vector<double> g_to_p;
  for (size_t i = 0; i < sp_bytes.size(); ++i) {
    if (sp_bytes[i]) p_to_g.push_back(std::sqrt(dist_to_g[i]));
    if (sg_bytes[i]) g_to_p.push_back(std::sqrt(dist_to_p[i]));
  }
  return std::max(percentile(std::move(p_to_g), 0.95), percentile(std::move(g_to_p), 0.95));
}

SensSpec sensitivity_specificity(const torch::Tensor& pred, const torch::Tensor& gt) {
  check_same_shape(pred, gt, "sensitivity_specificity");
  const auto p = pred.to(torch::kBool);
  const auto g = gt.to(torch::kBool);
  const auto tp = p.logical_and(g).sum().item<int64_t>();
  const auto fn = p.logical_not().logical_and(g).sum().item<int64_t>();
  const auto fp = p.logical_and(g.logical_not()).sum().item<int64_t>();
  const auto tn = p.numel() - tp - fn - fp;
  SensSpec r;
  if (tp + fn > 0) r.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (tn + fp > 0) r.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return r;
}

std::vector<double> apply_empty_policy(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  double max_finite = -1.0;
  bool any_undefined = false;
  for (double v : values) {
    if (std::isfinite(v)) {
      max_finite = std::max(max_finite, v);
    } else {
      any_undefined = true;
    }
  }
  if (!any_undefined) return out;
  if (max_finite < 0.0) throw ValidationError("empty-mask policy: no finite HD95 in the cohort");
  for (auto& v : out) {
    if (!std::isfinite(v)) v = max_finite;
  }
  return out;
}

double CaseMetrics::mean_region_dice() const {
  return (regions[0].dice + regions[1].dice + regions[2].dice) / 3.0;
}

CaseMetrics evaluate_case(const std::string& subject_id, const LabelMap& pred, const LabelMap& gt,
                          const Spacing3& spacing) {
  if (pred.extent() != gt.extent()) {
    throw ValidationError("prediction for '" + subject_id + "' has extent " + to_string(pred.extent()) +
                          ", ground truth " + to_string(gt.extent()));
  }
  CaseMetrics m;
  m.subject_id = subject_id;
  const auto pc = derive_compound_masks(pred);
  const auto gc = derive_compound_masks(gt);
  const std::array<std::pair<torch::Tensor, torch::Tensor>, 3> pairs{
      std::pair{pc.et, gc.et}, std::pair{pc.tc, gc.tc}, std::pair{pc.wt, gc.wt}};
  for (size_t r = 0; r < 3; ++r) {
    const auto& [p, g] = pairs[r];
    const auto ss = sensitivity_specificity(p, g);
    m.regions[r] = {dsc(p, g), hd95(p, g, spacing), ss.sensitivity, ss.specificity};
  }
  const auto ps = derive_subregion_masks(pred);
  const auto gs = derive_subregion_masks(gt);
  m.subregion_dice = {dsc(ps.ncr, gs.ncr), dsc(ps.ed, gs.ed), dsc(ps.et, gs.et)};
  return m;
}

void apply_empty_policy(std::vector<CaseMetrics>& cases) {
  for (size_t r = 0; r < 3; ++r) {
    std::vector<double> values;
    for (const auto& c : cases) values.push_back(c.regions[r].hd95_mm);
    const auto fixed = apply_empty_policy(values);
    for (size_t i = 0; i < cases.size(); ++i) cases[i].regions[r].hd95_mm = fixed[i];
  }
}

SummaryStats summarize(std::span<const double> values) {
  SummaryStats s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / (n - 1.0));
  }
  s.median = percentile(std::vector<double>(values.begin(), values.end()), 0.5);
  return s;
}

CohortSummary summarize_cohort(const std::vector<CaseMetrics>& cases) {
  CohortSummary s;
  s.n_cases = cases.size();
  for (size_t r = 0; r < 3; ++r) {
    std::array<std::vector<double>, 4> cols;
    for (const auto& c : cases) {
      const auto& m = c.regions[r];
      cols[0].push_back(m.dice);
      cols[1].push_back(m.hd95_mm);
      cols[2].push_back(m.sensitivity);
      cols[3].push_back(m.specificity);
    }
    for (size_t k = 0; k < 4; ++k) s.regions[r][k] = summarize(cols[k]);
  }
  for (size_t k = 0; k < 3; ++k) {
    std::vector<double> col;
    for (const auto& c : cases) col.push_back(c.subregion_dice[k]);
    s.subregion_dice[k] = summarize(col);
  }
  s.mean_dice_et_tc_wt = (s.regions[0][0].mean + s.regions[1][0].mean + s.regions[2][0].mean) / 3.0;
  return s;
}

CohortEvaluation evaluate_predictions(const std::map<std::string, LabelMap>& predictions,
                                      const std::vector<Subject>& test_set) {
  if (test_set.empty()) throw ValidationError("test set is empty");
  CohortEvaluation ev;
  for (const auto& s : test_set) {
    const auto& id = s.volume.subject_id();
    auto it = predictions.find(id);
    if (it == predictions.end()) throw ValidationError("missing prediction for subject '" + id + "'");
    ev.cases.push_back(evaluate_case(id, it->second, s.labels, s.volume.voxel_spacing_mm()));
  }
  apply_empty_policy(ev.cases);
  ev.summary = summarize_cohort(ev.cases);
  return ev;
}

Prediction predict_subject(SegGuidedNet& net, const Subject& subject, const Extent3& patch) {
  torch::NoGradGuard no_grad;
  const bool was_training = net->is_training();
  net->eval();
  const auto crop = center_crop(subject.volume, subject.labels, patch);
  const auto out = net->forward(crop.image.unsqueeze(0));
  net->train(was_training);
  const auto extent = subject.labels.extent();
  auto labels = paste_labels(argmax_labels(out.seg_logits[0].to(torch::kFloat32)), crop.origin, extent);
  const auto attn_crop = torch::sigmoid(out.attn_logits[0].to(torch::kFloat32));
  std::vector<torch::Tensor> attn;
  for (int64_t c = 0; c < attn_crop.size(0); ++c) attn.push_back(paste_labels(attn_crop[c], crop.origin, extent));
  return {LabelMap(labels), torch::stack(attn)};
}

CohortEvaluation evaluate_cohort(SegGuidedNet& net, const std::vector<Subject>& test_set, const Extent3& patch) {
  std::map<std::string, LabelMap> predictions;
  for (const auto& s : test_set) predictions.emplace(s.volume.subject_id(), predict_subject(net, s, patch).labels);
  return evaluate_predictions(predictions, test_set);
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

constexpr std::array<const char*, 4> kMetricNames{"dice", "hd95_mm", "sensitivity", "specificity"};
constexpr std::array<const char*, 3> kSubRegionNames{"NCR", "ED", "ET"};

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string case_header() {
  std::string h = "subject_id";
  for (auto r : kRegions) {
    for (auto m : kMetricNames) h += "," + lower(region_name(r)) + "_" + m;
  }
  for (auto s : kSubRegionNames) h += ",label_" + lower(s) + "_dice";
  return h;
}

}  // namespace

void write_case_metrics_csv(const fs::path& path, const std::vector<CaseMetrics>& cases) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# schema_version: " << kMetricsSchemaVersion << "\n" << case_header() << "\n";
  for (const auto& c : cases) {
    out << c.subject_id;
    for (const auto& m : c.regions) {
      out << "," << num(m.dice) << "," << num(m.hd95_mm) << "," << num(m.sensitivity) << "," << num(m.specificity);
    }
    for (double d : c.subregion_dice) out << "," << num(d);
    out << "\n";
  }
}

std::vector<CaseMetrics> read_case_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "# schema_version: " + std::to_string(kMetricsSchemaVersion)) {
    throw std::runtime_error("unsupported metrics schema in " + path.string());
  }
  std::getline(in, line);
  if (line != case_header()) throw std::runtime_error("unexpected metrics header in " + path.string());
  std::vector<CaseMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 16) throw std::runtime_error("malformed metrics row: " + line);
    CaseMetrics c;
    c.subject_id = cells[0];
    size_t k = 1;
    for (auto& m : c.regions) {
      m.dice = std::stod(cells[k++]);
      m.hd95_mm = std::stod(cells[k++]);
      m.sensitivity = std::stod(cells[k++]);
      m.specificity = std::stod(cells[k++]);
    }
    for (auto& d : c.subregion_dice) d = std::stod(cells[k++]);
    out.push_back(std::move(c));
  }
  return out;
}

void write_summary_csv(const fs::path& path, const CohortSummary& s) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# schema_version: " << kMetricsSchemaVersion << "\n";
  out << "# n_cases: " << s.n_cases << "\n";
  out << "region,metric,mean,std,median\n";
  for (size_t r = 0; r < 3; ++r) {
    for (size_t k = 0; k < 4; ++k) {
      const auto& st = s.regions[r][k];
      out << region_name(kRegions[r]) << "," << kMetricNames[k] << "," << num(st.mean) << "," << num(st.std) << ","
          << num(st.median) << "\n";
    }
  }
  for (size_t k = 0; k < 3; ++k) {
    const auto& st = s.subregion_dice[k];
    out << "label_" << kSubRegionNames[k] << ",dice," << num(st.mean) << "," << num(st.std) << "," << num(st.median)
        << "\n";
  }
  out << "mean_ET_TC_WT,dice," << num(s.mean_dice_et_tc_wt) << ",,\n";
}

}  // namespace segguide
