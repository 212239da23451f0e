#include "xcvae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "xcvae/tensor.hpp"

namespace xcvae {
namespace {

void check_binary(std::span<const int> labels, const char* what) {
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError(std::string(what) + ": values must be 0 or 1");
  }
}

void check_pair(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) {
    throw ValidationError(std::string(what) + ": scores and labels differ in length");
  }
  check_binary(labels, what);
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == long(labels.size())) {
    throw ValidationError(std::string(what) + ": both classes must be present");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw ValidationError(std::string(what) + ": non-finite score");
  }
}

std::optional<double> ratio(long num, long den) {
  if (den == 0) return std::nullopt;
  return double(num) / double(den);
}

}  // namespace

Confusion count_confusion(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw ValidationError("confusion: predictions and labels differ in length");
  }
  if (predictions.empty()) throw ValidationError("confusion: empty input");
  check_binary(predictions, "confusion predictions");
  check_binary(labels, "confusion labels");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      (predictions[i] == 1 ? c.tp : c.fn)++;
    } else {
      (predictions[i] == 1 ? c.fp : c.tn)++;
    }
  }
  return c;
}

ConfusionMetrics confusion_metrics(const Confusion& c) {
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0) {
    throw ValidationError("confusion: negative count");
  }
  if (c.total() == 0) throw ValidationError("confusion: empty input");
  ConfusionMetrics m;
  m.counts = c;
  m.sensitivity = ratio(c.tp, c.tp + c.fn);
  m.specificity = ratio(c.tn, c.tn + c.fp);
  m.precision = ratio(c.tp, c.tp + c.fp);
  if (m.sensitivity && m.precision && *m.sensitivity + *m.precision > 0) {
    m.f1 = 2 * *m.precision * *m.sensitivity / (*m.precision + *m.sensitivity);
  } else if (m.sensitivity && m.precision) {
    m.f1 = 0.0;
  }
  return m;
}

ConfusionMetrics confusion_metrics(std::span<const int> predictions, std::span<const int> labels) {
  return confusion_metrics(count_confusion(predictions, labels));
}

std::vector<int> threshold_scores(std::span<const double> scores, double threshold) {
  std::vector<int> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(),
                 [&](double s) { return s >= threshold ? 1 : 0; });
  return out;
}

double auc_rank(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores, labels, "auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  long pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * double(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        pos_rank_sum += midrank;
        ++pos;
      }
    }
    i = j;
  }
  const double neg = double(long(n) - pos);
  return (pos_rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * neg);
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
  RocCurve curve;
  curve.auc = auc_rank(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  const double P = double(std::count(labels.begin(), labels.end(), 1));
  const double N = double(n) - P;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    const double t = scores[order[i]];
    while (i < n && scores[order[i]] == t) {
      (labels[order[i]] == 1 ? tp : fp)++;
      ++i;
    }
    curve.points.push_back({t, double(fp) / N, double(tp) / P});
  }
  return curve;
}

FprAtTpr fpr_at_tpr(std::span<const double> scores, std::span<const int> labels,
                    double tpr_target) {
  if (!(tpr_target >= 0.0)) throw ValidationError("fpr_at_tpr: target must be non-negative");
  const RocCurve curve = roc_auc(scores, labels);
  std::optional<FprAtTpr> best;
  const RocPoint* top = &curve.points.front();
  for (const RocPoint& p : curve.points) {
    if (p.tpr > top->tpr || (p.tpr == top->tpr && p.fpr < top->fpr)) top = &p;
    if (p.tpr >= tpr_target && (!best || p.fpr < best->fpr)) {
      best = FprAtTpr{p.fpr, p.tpr, p.threshold, true};
    }
  }
  if (best) return *best;
  return {top->fpr, top->tpr, top->threshold, false};
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile: empty input");
  std::sort(values.begin(), values.end());
  const double h = (double(values.size()) - 1.0) * std::clamp(q, 0.0, 1.0);
  const auto lo = std::size_t(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - double(lo)) * (values[hi] - values[lo]);
}

namespace {

struct Strata {
  std::vector<std::size_t> pos, neg;
};

Strata stratify(std::span<const int> labels) {
  Strata s;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? s.pos : s.neg).push_back(i);
  return s;
}

void check_bootstrap(const BootstrapConfig& cfg) {
  if (cfg.iterations < 1) throw ValidationError("bootstrap: iterations must be positive");
  if (!(cfg.level > 0.0 && cfg.level < 1.0)) {
    throw ValidationError("bootstrap: level must lie in (0, 1)");
  }
}

std::mt19937_64 iteration_stream(std::uint64_t seed, int iteration) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(iteration)};
  return std::mt19937_64(seq);
}

/// Fills `s` and `l` with one stratified resample.
void resample(const Strata& strata, std::span<const double> scores, std::span<const int> labels,
              std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& l) {
  s.clear();
  l.clear();
  for (const auto* group : {&strata.pos, &strata.neg}) {
    std::uniform_int_distribution<std::size_t> pick(0, group->size() - 1);
    for (std::size_t k = 0; k < group->size(); ++k) {
      const std::size_t i = (*group)[pick(rng)];
      s.push_back(scores[i]);
      l.push_back(labels[i]);
    }
  }
}

}  // namespace

Interval bootstrap_ci(std::span<const double> scores, std::span<const int> labels,
                      const Statistic& statistic, const BootstrapConfig& cfg) {
  check_pair(scores, labels, "bootstrap");
  check_bootstrap(cfg);
  const Strata strata = stratify(labels);
  std::vector<double> stats(std::size_t(cfg.iterations));
  std::vector<double> s;
  std::vector<int> l;
  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = iteration_stream(cfg.seed, it);
    resample(strata, scores, labels, rng, s, l);
    stats[std::size_t(it)] = statistic(s, l);
  }
  const double tail = (1.0 - cfg.level) / 2.0;
  return {quantile(stats, tail), quantile(stats, 1.0 - tail)};
}

double tpr_at_fpr(const RocCurve& curve, double fpr) {
  double best = 0.0;
  for (const RocPoint& p : curve.points) {
    if (p.fpr <= fpr + 1e-12) best = std::max(best, p.tpr);
  }
  return best;
}

std::vector<RocBandPoint> roc_band(std::span<const double> scores, std::span<const int> labels,
                                   std::size_t grid_points, const BootstrapConfig& cfg) {
  check_pair(scores, labels, "roc_band");
  check_bootstrap(cfg);
  if (grid_points < 2) throw ValidationError("roc_band: need at least two grid points");
  const RocCurve full = roc_auc(scores, labels);
  const Strata strata = stratify(labels);
  std::vector<std::vector<double>> tprs(grid_points, std::vector<double>(std::size_t(cfg.iterations)));
  std::vector<double> s;
  std::vector<int> l;
  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = iteration_stream(cfg.seed, it);
    resample(strata, scores, labels, rng, s, l);
    const RocCurve c = roc_auc(s, l);
    for (std::size_t g = 0; g < grid_points; ++g) {
      tprs[g][std::size_t(it)] = tpr_at_fpr(c, double(g) / double(grid_points - 1));
    }
  }
  const double tail = (1.0 - cfg.level) / 2.0;
  std::vector<RocBandPoint> band(grid_points);
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double x = double(g) / double(grid_points - 1);
    band[g] = {x, tpr_at_fpr(full, x), quantile(tprs[g], tail), quantile(tprs[g], 1.0 - tail)};
  }
  return band;
}

EvalResult evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                           const EvalConfig& cfg) {
  EvalResult r;
  r.threshold = cfg.threshold;
  r.tpr_target = cfg.tpr_target;
  const std::vector<int> preds = threshold_scores(scores, cfg.threshold);
  r.confusion = confusion_metrics(preds, labels);
  r.roc = roc_auc(scores, labels);
  r.auc = r.roc.auc;
  r.auc_ci = bootstrap_ci(scores, labels, auc_rank, cfg.bootstrap);
  r.fpr_at_target = fpr_at_tpr(scores, labels, cfg.tpr_target);
  r.fpr_ci = bootstrap_ci(
      scores, labels,
      [&](std::span<const double> s, std::span<const int> l) {
        return fpr_at_tpr(s, l, cfg.tpr_target).fpr;
      },
      cfg.bootstrap);
  return r;
}

}  // namespace xcvae
