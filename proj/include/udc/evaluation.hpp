#pragma once

// Selective evaluation: rank predictions by uncertainty, hand the top ratio to
// (perfect) human experts and score what is left.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace udc {

struct ScoredPrediction {
  std::string instance_id;
  int predicted_class = 0;
  int true_class = 0;
  double score = 0.0;  // higher == more uncertain
};

enum class MetricMode {
  remaining_only,  // metrics over the kept set only
  combined,        // deferred items count as correctly labeled, metrics over all items
};

MetricMode parse_metric_mode(std::string_view name);
std::string_view to_string(MetricMode mode);

struct DeferralPolicy {
  std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4};
  std::vector<MetricMode> modes{MetricMode::remaining_only, MetricMode::combined};

  void validate() const;
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
};

/// Macro-F1 averages over the classes present in `truth`; a class that is never
/// predicted scores F1 = 0. Throws InvalidArgument on empty input.
ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> truth);

double accuracy(std::span<const ScoredPrediction> kept);
double micro_f1(std::span<const ScoredPrediction> kept);
double macro_f1(std::span<const ScoredPrediction> kept);

/// Orders by score descending, then instance_id ascending.
bool more_uncertain(const ScoredPrediction& a, const ScoredPrediction& b);

/// floor(ratio * n), computed so that exact decimal products are not lost to
/// rounding (0.3 * 10 == 3).
std::size_t deferred_count(double ratio, std::size_t n);

struct DeferralSplit {
  std::vector<ScoredPrediction> deferred;  // most uncertain first
  std::vector<ScoredPrediction> kept;
};

DeferralSplit select_deferred(std::span<const ScoredPrediction> predictions, double ratio);

/// Metrics after deferring `deferred` under `mode`.
ClassificationMetrics deferral_metrics(const DeferralSplit& split, MetricMode mode);

struct EvalRow {
  std::string scorer;
  double ratio = 0.0;
  MetricMode mode = MetricMode::remaining_only;
  ClassificationMetrics metrics;
  double improvement_ratio = 0.0;  // relative micro-F1 change vs. ratio 0
  std::size_t n_deferred = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
};

/// One row per (mode, ratio) of `policy`.
EvalReport evaluate(std::span<const ScoredPrediction> predictions, const DeferralPolicy& policy,
                    const std::string& scorer, std::uint64_t seed);

/// Mean metrics when a uniformly random floor(r*n)-subset is deferred, over `trials`.
ClassificationMetrics random_deferral_baseline(std::span<const ScoredPrediction> predictions, double ratio,
                                               MetricMode mode, int trials, std::uint64_t seed);

void write_report_csv(const EvalReport& report, std::ostream& out);
/// Aligned text table: one block per (scorer, mode), ratios across.
std::string format_report_table(const EvalReport& report);

}  // namespace udc
