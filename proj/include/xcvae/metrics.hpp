#pragma once

// Binary diagnosis metrics: confusion-matrix rates, ROC/AUC, stratified
// percentile bootstrap intervals and FPR at a fixed sensitivity.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace xcvae {

struct Confusion {
  long tp = 0;
  long tn = 0;
  long fp = 0;
  long fn = 0;

  long total() const { return tp + tn + fp + fn; }
};

/// Rates with a zero denominator are left empty instead of NaN.
struct ConfusionMetrics {
  Confusion counts;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> precision;
  std::optional<double> f1;
};

Confusion count_confusion(std::span<const int> predictions, std::span<const int> labels);
ConfusionMetrics confusion_metrics(std::span<const int> predictions, std::span<const int> labels);
ConfusionMetrics confusion_metrics(const Confusion& counts);

/// 1 where score >= threshold.
std::vector<int> threshold_scores(std::span<const double> scores, double threshold);

struct RocPoint {
  double threshold = 0.0;  // +inf for the (0, 0) corner
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  double auc = 0.0;
  std::vector<RocPoint> points;  // non-decreasing in fpr and tpr
};

/// Mann-Whitney AUC with midranks for ties; throws if a class is missing.
double auc_rank(std::span<const double> scores, std::span<const int> labels);
RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

struct FprAtTpr {
  double fpr = 1.0;
  double tpr = 1.0;
  double threshold = 0.0;
  bool reached = true;
};

/// Smallest empirical FPR over thresholds whose TPR meets the target. When no
/// threshold does, returns the point of maximal TPR with reached = false.
FprAtTpr fpr_at_tpr(std::span<const double> scores, std::span<const int> labels,
                    double tpr_target = 0.95);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

struct BootstrapConfig {
  int iterations = 2000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

using Statistic = std::function<double(std::span<const double>, std::span<const int>)>;

/// Stratified resampling (positives and negatives separately, with
/// replacement). Percentile interval, linear interpolation between order
/// statistics. Iteration i draws from its own stream seeded by (seed, i).
Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels,
                      const Statistic& statistic, const BootstrapConfig& cfg = {});

struct RocBandPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double tpr_low = 0.0;
  double tpr_high = 0.0;
};

/// Pointwise bootstrap band of the step ROC evaluated on an even FPR grid.
std::vector<RocBandPoint> roc_band(std::span<const double> scores, std::span<const int> labels,
                                   std::size_t grid_points = 101, const BootstrapConfig& cfg = {});

/// TPR of the step ROC at a given FPR (largest TPR among points with fpr <= x).
double tpr_at_fpr(const RocCurve& curve, double fpr);

/// Type-7 sample quantile; sorts a copy.
double quantile(std::vector<double> values, double q);

struct EvalConfig {
  double threshold = 0.5;
  double tpr_target = 0.95;
  BootstrapConfig bootstrap;
};

struct EvalResult {
  ConfusionMetrics confusion;
  double threshold = 0.5;
  double auc = 0.0;
  Interval auc_ci;
  FprAtTpr fpr_at_target;
  Interval fpr_ci;
  double tpr_target = 0.95;
  RocCurve roc;
};

/// All metrics for positive-class probabilities `scores`.
EvalResult evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                           const EvalConfig& cfg = {});

}  // namespace xcvae
