#include "nullbus/eval_metrics.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace nullbus {

ConfusionCounts confusion(const Tensor& probabilities, const Tensor& mask, double threshold) {
  if (!probabilities.same_shape(mask))
    throw std::invalid_argument("confusion: shape mismatch " + probabilities.shape_str() +
                                " vs " + mask.shape_str());
  ConfusionCounts c;
  for (int64_t i = 0; i < probabilities.numel(); ++i) {
    const double p = probabilities[i];
    if (p < 0.0 || p > 1.0)
      throw std::invalid_argument("confusion: probability outside [0,1]: " + std::to_string(p));
    const double m = mask[i];
    if (m != 0.0 && m != 1.0)
      throw std::invalid_argument("confusion: mask is not binary");
    const bool pred = p >= threshold;
    const bool truth = m == 1.0;
    if (pred && truth)
      ++c.tp;
    else if (pred && !truth)
      ++c.fp;
    else if (!pred && truth)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

MetricRow metric_row(const ConfusionCounts& c) {
  MetricRow r;
  const int64_t overlap_den = c.tp + c.fp + c.fn;
  r.iou = overlap_den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(overlap_den);
  r.dice = overlap_den == 0
               ? 1.0
               : 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  r.fpr = (c.fp + c.tn) == 0 ? 0.0
                             : static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
  r.fnr = (c.fn + c.tp) == 0 ? 0.0
                             : static_cast<double>(c.fn) / static_cast<double>(c.fn + c.tp);
  return r;
}

MetricRow mean_of(const std::vector<MetricRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("mean_of: empty input");
  // Sum in 64-bit, divide once.
  double iou = 0.0, dice = 0.0, fpr = 0.0, fnr = 0.0;
  for (const auto& r : rows) {
    iou += r.iou;
    dice += r.dice;
    fpr += r.fpr;
    fnr += r.fnr;
  }
  const double n = static_cast<double>(rows.size());
  return {iou / n, dice / n, fpr / n, fnr / n};
}

SummaryTable aggregate(const std::vector<PerImageResult>& rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate: empty input");
  std::map<int, std::vector<MetricRow>> by_fold;
  for (const auto& r : rows) by_fold[r.fold].push_back(r.metrics);
  SummaryTable table;
  std::vector<MetricRow> fold_means;
  for (const auto& [fold, fold_rows] : by_fold) {
    const MetricRow m = mean_of(fold_rows);
    table.fold_rows.emplace_back(fold, m);
    fold_means.push_back(m);
  }
  table.mean = mean_of(fold_means);
  return table;
}

MetricRow aggregate_fold_rows(const std::vector<MetricRow>& fold_rows) {
  return mean_of(fold_rows);
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string format_summary(const SummaryTable& table) {
  std::ostringstream os;
  os << "fold,IoU,Dice,FPR,FNR\n";
  for (const auto& [fold, m] : table.fold_rows)
    os << fold << "," << format_metric(m.iou) << "," << format_metric(m.dice) << ","
       << format_metric(m.fpr) << "," << format_metric(m.fnr) << "\n";
  os << "mean," << format_metric(table.mean.iou) << "," << format_metric(table.mean.dice) << ","
     << format_metric(table.mean.fpr) << "," << format_metric(table.mean.fnr) << "\n";
  return os.str();
}

void write_results_csv(const std::filesystem::path& path,
                       const std::vector<PerImageResult>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write results: " + path.string());
  out << "id,fold,IoU,Dice,FPR,FNR\n";
  for (const auto& r : rows)
    out << r.id << "," << r.fold << "," << format_metric(r.metrics.iou) << ","
        << format_metric(r.metrics.dice) << "," << format_metric(r.metrics.fpr) << ","
        << format_metric(r.metrics.fnr) << "\n";
}

void write_summary_csv(const std::filesystem::path& path, const SummaryTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write summary: " + path.string());
  out << format_summary(table);
}

}  // namespace nullbus
