#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nullbus/tensor.hpp"

namespace nullbus {

/// Pixel-wise confusion counts at a fixed threshold.
struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  int64_t total() const { return tp + fp + fn + tn; }
};

struct MetricRow {
  double iou = 0.0, dice = 0.0, fpr = 0.0, fnr = 0.0;
};

/// One evaluated image.
struct PerImageResult {
  std::string id;
  int fold = 0;
  MetricRow metrics;
};

/// Per-fold means plus their mean, mirroring the usual cross-validation
/// results table (fold rows + Mean row).
struct SummaryTable {
  std::vector<std::pair<int, MetricRow>> fold_rows;
  MetricRow mean;
};

/// prediction = (probability >= threshold); counts by definition.
/// Probabilities must lie in [0,1]; the mask must be binary.
ConfusionCounts confusion(const Tensor& probabilities, const Tensor& mask,
                          double threshold = 0.5);

/// IoU = TP/(TP+FP+FN), Dice = 2TP/(2TP+FP+FN), FPR = FP/(FP+TN),
/// FNR = FN/(FN+TP). Degenerate denominators: both-empty -> IoU=Dice=1;
/// no ground-truth positives -> FNR=0; no ground-truth negatives -> FPR=0.
MetricRow metric_row(const ConfusionCounts& c);

MetricRow mean_of(const std::vector<MetricRow>& rows);

/// Per-image rows averaged within each fold, then fold means averaged
/// into the Mean row.
SummaryTable aggregate(const std::vector<PerImageResult>& rows);

/// Aggregates rows that are already fold-level (one row per fold).
MetricRow aggregate_fold_rows(const std::vector<MetricRow>& fold_rows);

std::string format_metric(double v);  // fixed 4 decimals
std::string format_summary(const SummaryTable& table);

void write_results_csv(const std::filesystem::path& path,
                       const std::vector<PerImageResult>& rows);
void write_summary_csv(const std::filesystem::path& path, const SummaryTable& table);

}  // namespace nullbus
