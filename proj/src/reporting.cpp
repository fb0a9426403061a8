#include "segguide/reporting.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace segguide {

namespace fs = std::filesystem;

namespace {

const cv::Scalar kWhite(255, 255, 255);
const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrey(160, 160, 160);
const cv::Scalar kLightGrey(225, 225, 225);
const cv::Scalar kBlue(200, 90, 30);
const cv::Scalar kRed(40, 40, 220);
const cv::Scalar kPurple(160, 60, 140);

// BGR overlay colours per label.
const std::array<cv::Vec3b, 4> kLabelColours{cv::Vec3b(0, 0, 0), cv::Vec3b(0, 0, 255), cv::Vec3b(0, 165, 255),
                                             cv::Vec3b(0, 200, 0)};

constexpr int kFont = cv::FONT_HERSHEY_SIMPLEX;

void write_png(const fs::path& path, const cv::Mat& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw std::runtime_error("failed to write " + path.string());
  }
}

std::string short_num(double v) {
  char buf[32];
  if (v != 0.0 && (std::abs(v) < 1e-2 || std::abs(v) >= 1e4)) {
    std::snprintf(buf, sizeof(buf), "%.1e", v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.3g", v);
  }
  return buf;
}

void put_text(cv::Mat& img, const std::string& text, cv::Point org, double scale = 0.45,
              const cv::Scalar& colour = kBlack, int thickness = 1) {
  cv::putText(img, text, org, kFont, scale, colour, thickness, cv::LINE_AA);
}

void put_centred(cv::Mat& img, const std::string& text, int cx, int y, double scale = 0.5,
                 const cv::Scalar& colour = kBlack) {
  int base = 0;
  const auto size = cv::getTextSize(text, kFont, scale, 1, &base);
  put_text(img, text, {cx - size.width / 2, y}, scale, colour);
}

struct Series {
  std::vector<double> y;
  cv::Scalar colour;
  std::string label;
};

void draw_dashed_vline(cv::Mat& img, int x, int y0, int y1, const cv::Scalar& colour) {
  for (int y = y0; y < y1; y += 8) cv::line(img, {x, y}, {x, std::min(y + 4, y1)}, colour, 1, cv::LINE_AA);
}

// One line chart inside `area`.
void draw_chart(cv::Mat& img, const cv::Rect& area, const std::string& title, const std::vector<double>& x,
                const std::vector<Series>& series, bool log_y, int best_x) {
  const int left = area.x + 70;
  const int right = area.x + area.width - 15;
  const int top = area.y + 35;
  const int bottom = area.y + area.height - 45;
  put_centred(img, title, (left + right) / 2, area.y + 22, 0.55);

  auto tf = [log_y](double v) { return log_y ? std::log10(std::max(v, 1e-300)) : v; };
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, tf(v));
      hi = std::max(hi, tf(v));
    }
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double x0 = x.front();
  const double x1 = x.back() > x0 ? x.back() : x0 + 1.0;
  auto px = [&](double v) { return left + static_cast<int>(std::lround((v - x0) / (x1 - x0) * (right - left))); };
  auto py = [&](double v) { return bottom - static_cast<int>(std::lround((tf(v) - lo) / (hi - lo) * (bottom - top))); };

  for (int i = 0; i <= 4; ++i) {
    const double t = lo + (hi - lo) * i / 4.0;
    const int y = bottom - static_cast<int>(std::lround((t - lo) / (hi - lo) * (bottom - top)));
    cv::line(img, {left, y}, {right, y}, kLightGrey, 1);
    put_text(img, short_num(log_y ? std::pow(10.0, t) : t), {area.x + 8, y + 4}, 0.38, kGrey);
  }
  const double step = std::max(1.0, std::ceil((x1 - x0) / 5.0));
  for (double t = x0; t <= x1 + 1e-9; t += step) {
    const int xx = px(t);
    cv::line(img, {xx, bottom}, {xx, bottom + 4}, kGrey, 1);
    put_centred(img, short_num(t), xx, bottom + 18, 0.38, kGrey);
  }
  put_centred(img, "epoch", (left + right) / 2, bottom + 36, 0.42, kGrey);
  cv::rectangle(img, {left, top}, {right, bottom}, kGrey, 1);

  if (best_x >= 0) {
    const int bx = px(static_cast<double>(best_x));
    draw_dashed_vline(img, bx, top, bottom, kPurple);
    put_text(img, "best epoch: " + std::to_string(best_x), {std::min(bx + 5, right - 120), bottom - 8}, 0.42, kPurple);
  }
  int legend_y = top + 36;
  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (size_t i = 0; i < s.y.size() && i < x.size(); ++i) {
      if (std::isfinite(s.y[i])) pts.emplace_back(px(x[i]), py(s.y[i]));
    }
    if (pts.size() >= 2) cv::polylines(img, pts, false, s.colour, 2, cv::LINE_AA);
    for (const auto& p : pts) {
      if (pts.size() <= 60) cv::circle(img, p, 2, s.colour, cv::FILLED, cv::LINE_AA);
    }
    if (!s.label.empty()) {
      cv::line(img, {right - 110, legend_y - 4}, {right - 90, legend_y - 4}, s.colour, 2, cv::LINE_AA);
      put_text(img, s.label, {right - 85, legend_y}, 0.42, kBlack);
      legend_y += 18;
    }
  }
}

// [X, Y] float slice of `t` ([.., X, Y, Z]) at axial index z.
cv::Mat slice_to_mat(const torch::Tensor& grid, int64_t z) {
  auto s = grid.select(-1, z).to(torch::kFloat32).contiguous();
  cv::Mat m(static_cast<int>(s.size(0)), static_cast<int>(s.size(1)), CV_32F);
  std::memcpy(m.data, s.data_ptr<float>(), static_cast<size_t>(s.numel()) * sizeof(float));
  return m;
}

cv::Mat grey_image(const MpMriVolume& volume, int64_t z) {
  auto ch = slice_to_mat(volume.channels()[static_cast<int64_t>(Modality::kT1ce)], z);
  auto mask = slice_to_mat(volume.brain_mask().to(torch::kFloat32), z);
  double lo = 0.0;
  double hi = 1.0;
  cv::Mat m8;
  mask.convertTo(m8, CV_8U);
  if (cv::countNonZero(m8) > 0) cv::minMaxLoc(ch, &lo, &hi, nullptr, nullptr, m8);
  if (hi - lo < 1e-12) hi = lo + 1.0;
  cv::Mat grey;
  ch.convertTo(grey, CV_8U, 255.0 / (hi - lo), -lo * 255.0 / (hi - lo));
  grey.setTo(0, m8 == 0);
  cv::Mat bgr;
  cv::cvtColor(grey, bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

cv::Mat overlay(const cv::Mat& base, const torch::Tensor& labels, int64_t z) {
  auto lab = slice_to_mat(labels.to(torch::kFloat32), z);
  cv::Mat out = base.clone();
  for (int r = 0; r < out.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) {
      const int l = static_cast<int>(lab.at<float>(r, c));
      if (l <= 0 || l > 3) continue;
      auto& px = out.at<cv::Vec3b>(r, c);
      for (int k = 0; k < 3; ++k) px[k] = static_cast<uint8_t>((px[k] + kLabelColours[l][k]) / 2);
    }
  }
  return out;
}

cv::Mat error_map(const LabelMap& gt, const LabelMap& pred, int64_t z) {
  auto diff = slice_to_mat((gt.labels() != pred.labels()).to(torch::kFloat32), z);
  cv::Mat m8;
  diff.convertTo(m8, CV_8U, 255.0);
  cv::Mat bgr(m8.size(), CV_8UC3, cv::Scalar(0, 0, 0));
  bgr.setTo(cv::Scalar(255, 255, 255), m8);
  return bgr;
}

cv::Mat hot_map(const torch::Tensor& probs, int64_t z) {
  auto p = slice_to_mat(probs.clamp(0.0, 1.0), z);
  cv::Mat m8;
  p.convertTo(m8, CV_8U, 255.0);
  cv::Mat out;
  cv::applyColorMap(m8, out, cv::COLORMAP_HOT);
  return out;
}

cv::Mat binary_map(const torch::Tensor& mask, int64_t z) {
  auto m = slice_to_mat(mask.to(torch::kFloat32), z);
  cv::Mat m8;
  m.convertTo(m8, CV_8U, 255.0);
  cv::Mat bgr;
  cv::cvtColor(m8, bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

constexpr int kCell = 192;
constexpr int kHeader = 28;
constexpr int kRowLabel = 150;

cv::Mat fit_cell(const cv::Mat& img) {
  const double s = static_cast<double>(kCell) / std::max(img.rows, img.cols);
  cv::Mat resized;
  cv::resize(img, resized, cv::Size(), s, s, cv::INTER_NEAREST);
  cv::Mat cell(kCell, kCell, CV_8UC3, kBlack);
  resized.copyTo(cell(cv::Rect((kCell - resized.cols) / 2, (kCell - resized.rows) / 2, resized.cols, resized.rows)));
  return cell;
}

torch::Tensor attention_channel(const CaseView& view, int channel) {
  if (!view.attention.defined() || view.attention.dim() != 4 || view.attention.size(0) <= channel) {
    throw ValidationError("case '" + view.volume.subject_id() + "' has no attention channel " +
                          std::to_string(channel));
  }
  return view.attention[channel];
}

cv::Mat render_cell(PanelColumn column, const CaseView& view, int64_t z) {
  switch (column) {
    case PanelColumn::kT1ce: return grey_image(view.volume, z);
    case PanelColumn::kGtOverlay: return overlay(grey_image(view.volume, z), view.ground_truth.labels(), z);
    case PanelColumn::kPredOverlay: return overlay(grey_image(view.volume, z), view.prediction.labels(), z);
    case PanelColumn::kErrorMap: return error_map(view.ground_truth, view.prediction, z);
    case PanelColumn::kAttentionNcr: return hot_map(attention_channel(view, 0), z);
    case PanelColumn::kAttentionEd: return hot_map(attention_channel(view, 1), z);
    case PanelColumn::kAttentionEt: return hot_map(attention_channel(view, 2), z);
  }
  return {};
}

int64_t resolve_slice(const std::optional<int64_t>& requested, const LabelMap& gt) {
  const auto depth = gt.extent()[2];
  if (requested) {
    if (*requested < 0 || *requested >= depth) {
      throw ValidationError("slice index " + std::to_string(*requested) + " out of range [0, " +
                            std::to_string(depth) + ")");
    }
    return *requested;
  }
  return select_axial_slice(gt);
}

void check_view(const CaseView& v) {
  if (v.ground_truth.extent() != v.volume.extent() || v.prediction.extent() != v.volume.extent()) {
    throw ValidationError("case '" + v.volume.subject_id() + "': volume, ground truth and prediction extents differ");
  }
}

}  // namespace

void plot_training_curves(const std::vector<EpochRecord>& records, const fs::path& out_png) {
  if (records.size() < 2) throw ValidationError("training curves need at least two epoch records");
  std::vector<double> x;
  std::vector<double> tl, vl, td, vd, lr;
  for (const auto& r : records) {
    x.push_back(static_cast<double>(r.epoch));
    tl.push_back(r.train_loss);
    vl.push_back(r.val_loss);
    td.push_back(r.train_dice);
    vd.push_back(r.val_dice);
    lr.push_back(r.lr);
  }
  const auto best = std::min_element(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return a.val_loss < b.val_loss;
  });
  const int best_epoch = static_cast<int>(best->epoch);

  cv::Mat img(420, 1500, CV_8UC3, kWhite);
  draw_chart(img, {0, 0, 500, 420}, "Total loss", x, {{tl, kBlue, "train"}, {vl, kRed, "val"}}, false, best_epoch);
  draw_chart(img, {500, 0, 500, 420}, "Mean soft Dice", x, {{td, kBlue, "train"}, {vd, kRed, "val"}}, false,
             best_epoch);
  draw_chart(img, {1000, 0, 500, 420}, "Learning rate (cosine)", x, {{lr, kBlue, ""}}, true, best_epoch);
  write_png(out_png, img);
}

const char* column_title(PanelColumn c) {
  switch (c) {
    case PanelColumn::kT1ce: return "T1ce";
    case PanelColumn::kGtOverlay: return "GT overlay";
    case PanelColumn::kPredOverlay: return "Prediction";
    case PanelColumn::kErrorMap: return "Error map";
    case PanelColumn::kAttentionNcr: return "NCR attention";
    case PanelColumn::kAttentionEd: return "ED attention";
    case PanelColumn::kAttentionEt: return "ET attention";
  }
  return "?";
}

int64_t select_axial_slice(const LabelMap& gt) {
  const auto area = (gt.labels() > 0).sum({0, 1});  // per axial index
  if (area.max().item<int64_t>() == 0) return gt.extent()[2] / 2;
  // argmax returns the first maximal index.
  return area.argmax().item<int64_t>();
}

void render_case_panel(const std::vector<PanelSpec>& rows, const std::vector<CaseView>& cases, const fs::path& out_png) {
  if (rows.empty() || rows.size() != cases.size()) {
    throw ValidationError("render_case_panel needs one spec per case and at least one row");
  }
  const size_t n_cols = rows.front().columns.size();
  for (const auto& r : rows) {
    if (r.columns.empty()) throw ValidationError("panel spec for '" + r.subject_id + "' has no columns");
    if (r.columns.size() != n_cols) throw ValidationError("panel rows must share one column layout");
  }
  const int width = kRowLabel + static_cast<int>(n_cols) * (kCell + 6);
  const int height = kHeader + static_cast<int>(rows.size()) * (kCell + 6);
  cv::Mat img(height, width, CV_8UC3, kWhite);
  for (size_t c = 0; c < n_cols; ++c) {
    put_centred(img, column_title(rows.front().columns[c]), kRowLabel + static_cast<int>(c) * (kCell + 6) + kCell / 2,
                20, 0.5);
  }
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& view = cases[r];
    check_view(view);
    const int64_t z = resolve_slice(rows[r].slice_index, view.ground_truth);
    const int y = kHeader + static_cast<int>(r) * (kCell + 6);
    put_text(img, rows[r].subject_id, {6, y + kCell / 2 - 8}, 0.42);
    put_text(img, view.caption, {6, y + kCell / 2 + 10}, 0.38, kGrey);
    put_text(img, "z = " + std::to_string(z), {6, y + kCell / 2 + 28}, 0.38, kGrey);
    for (size_t c = 0; c < n_cols; ++c) {
      const auto cell = fit_cell(render_cell(rows[r].columns[c], view, z));
      cell.copyTo(img(cv::Rect(kRowLabel + static_cast<int>(c) * (kCell + 6), y, kCell, kCell)));
    }
  }
  write_png(out_png, img);
}

void render_attention_panel(const CaseView& view, std::optional<int64_t> slice_index, const fs::path& out_png) {
  check_view(view);
  const int64_t z = resolve_slice(slice_index, view.ground_truth);
  const auto masks = derive_subregion_masks(view.ground_truth);
  const std::array<torch::Tensor, 3> gt{masks.ncr, masks.ed, masks.et};
  const std::array<const char*, 3> names{"NCR", "ED", "ET"};
  const int width = kRowLabel + 3 * (kCell + 6);
  const int height = kHeader + 2 * (kCell + 6);
  cv::Mat img(height, width, CV_8UC3, kWhite);
  put_text(img, view.volume.subject_id(), {6, 20}, 0.42);
  put_text(img, "GT mask", {6, kHeader + kCell / 2}, 0.45);
  put_text(img, "attention", {6, kHeader + kCell + 6 + kCell / 2}, 0.45);
  put_text(img, "z = " + std::to_string(z), {6, kHeader + kCell + 6 + kCell / 2 + 20}, 0.38, kGrey);
  for (int c = 0; c < 3; ++c) {
    const int x = kRowLabel + c * (kCell + 6);
    put_centred(img, names[c], x + kCell / 2, 20, 0.5);
    fit_cell(binary_map(gt[c], z)).copyTo(img(cv::Rect(x, kHeader, kCell, kCell)));
    fit_cell(hot_map(attention_channel(view, c), z)).copyTo(img(cv::Rect(x, kHeader + kCell + 6, kCell, kCell)));
  }
  write_png(out_png, img);
}

Exemplars select_exemplars(const std::vector<CaseMetrics>& cases, size_t k_worst, ExemplarRanking ranking) {
  if (cases.size() < 3) throw ValidationError("exemplar selection needs at least three cases");
  auto score = [ranking](const CaseMetrics& c) {
    return ranking == ExemplarRanking::kTcDice ? c.regions[static_cast<size_t>(Region::kTC)].dice
                                               : c.mean_region_dice();
  };
  std::vector<size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const double sa = score(cases[a]);
    const double sb = score(cases[b]);
    if (sa != sb) return sa < sb;
    return cases[a].subject_id < cases[b].subject_id;
  });
  Exemplars e;
  e.worst = order.front();
  e.best = order.back();
  e.median = order[(order.size() - 1) / 2];
  for (size_t i = 0; i < std::min(k_worst, order.size()); ++i) e.failures.push_back(order[i]);
  return e;
}

void write_index_page(const fs::path& out_html, const std::string& title, const std::vector<IndexEntry>& entries) {
  if (out_html.has_parent_path()) fs::create_directories(out_html.parent_path());
  std::ofstream out(out_html);
  if (!out) throw std::runtime_error("cannot write " + out_html.string());
  out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << title << "</title></head>\n<body>\n<h1>"
      << title << "</h1>\n";
  for (const auto& e : entries) {
    out << "<h2>" << e.title << "</h2>\n<p><img src=\"" << e.file << "\" alt=\"" << e.title << "\"></p>\n";
  }
  out << "</body></html>\n";
}

}  // namespace segguide
