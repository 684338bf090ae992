#include "udc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "udc/error.hpp"
#include "udc/rng.hpp"

namespace udc {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ClassificationMetrics metrics_of(std::span<const ScoredPrediction> items, bool force_correct_prefix,
                                 std::size_t prefix) {
  std::vector<int> predicted, truth;
  predicted.reserve(items.size());
  truth.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    truth.push_back(items[i].true_class);
    predicted.push_back(force_correct_prefix && i < prefix ? items[i].true_class : items[i].predicted_class);
  }
  return classification_metrics(predicted, truth);
}

}  // namespace

MetricMode parse_metric_mode(std::string_view name) {
  if (name == "remaining_only") return MetricMode::remaining_only;
  if (name == "combined") return MetricMode::combined;
  throw InvalidArgument("unknown metric mode: " + std::string(name));
}

std::string_view to_string(MetricMode mode) {
  return mode == MetricMode::remaining_only ? "remaining_only" : "combined";
}

void DeferralPolicy::validate() const {
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] >= 0.0 && ratios[i] < 1.0)) throw InvalidArgument("deferral ratios must lie in [0, 1)");
    if (i > 0 && !(ratios[i] > ratios[i - 1])) throw InvalidArgument("deferral ratios must be strictly ascending");
  }
  if (modes.empty()) throw InvalidArgument("deferral policy needs at least one metric mode");
}

ClassificationMetrics classification_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.empty()) throw InvalidArgument("metrics of an empty prediction set");
  if (predicted.size() != truth.size()) throw InvalidArgument("predicted/truth length mismatch");
  struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0;
  };
  std::map<int, Counts> per_class;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == truth[i]) {
      ++correct;
      ++per_class[truth[i]].tp;
    } else {
      ++per_class[predicted[i]].fp;
      ++per_class[truth[i]].fn;
    }
  }
  std::set<int> present(truth.begin(), truth.end());
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());

  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& [c, n] : per_class) {
    tp += n.tp;
    fp += n.fp;
    fn += n.fn;
  }
  const double denom = static_cast<double>(2 * tp + fp + fn);
  m.micro_f1 = denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;

  double sum = 0.0;
  for (int c : present) {
    const auto& n = per_class[c];
    sum += 2.0 * static_cast<double>(n.tp) / static_cast<double>(2 * n.tp + n.fp + n.fn);
  }
  m.macro_f1 = sum / static_cast<double>(present.size());
  return m;
}

double accuracy(std::span<const ScoredPrediction> kept) { return metrics_of(kept, false, 0).accuracy; }
double micro_f1(std::span<const ScoredPrediction> kept) { return metrics_of(kept, false, 0).micro_f1; }
double macro_f1(std::span<const ScoredPrediction> kept) { return metrics_of(kept, false, 0).macro_f1; }

bool more_uncertain(const ScoredPrediction& a, const ScoredPrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.instance_id < b.instance_id;
}

std::size_t deferred_count(double ratio, std::size_t n) {
  const double exact = ratio * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::floor(exact));
  // 0.3 * 10 evaluates to 2.9999999999999996; snap products within a few ulps.
  if (std::abs(exact - static_cast<double>(k + 1)) <= 1e-9 * std::max(1.0, exact)) ++k;
  return std::min(k, n);
}

DeferralSplit select_deferred(std::span<const ScoredPrediction> predictions, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw InvalidArgument("deferral ratio must lie in [0, 1)");
  std::vector<ScoredPrediction> sorted(predictions.begin(), predictions.end());
  std::sort(sorted.begin(), sorted.end(), more_uncertain);
  const std::size_t k = deferred_count(ratio, sorted.size());
  DeferralSplit split;
  split.deferred.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k));
  split.kept.assign(sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  return split;
}

ClassificationMetrics deferral_metrics(const DeferralSplit& split, MetricMode mode) {
  if (mode == MetricMode::remaining_only) {
    if (split.kept.empty()) throw InvalidArgument("deferral leaves an empty kept set");
    return metrics_of(split.kept, false, 0);
  }
  std::vector<ScoredPrediction> all(split.deferred);
  all.insert(all.end(), split.kept.begin(), split.kept.end());
  return metrics_of(all, true, split.deferred.size());
}

EvalReport evaluate(std::span<const ScoredPrediction> predictions, const DeferralPolicy& policy,
                    const std::string& scorer, std::uint64_t seed) {
  policy.validate();
  if (predictions.empty()) throw InvalidArgument("evaluate: no predictions");
  EvalReport report;
  for (MetricMode mode : policy.modes) {
    const double base = deferral_metrics(select_deferred(predictions, 0.0), mode).micro_f1;
    for (double r : policy.ratios) {
      const auto split = select_deferred(predictions, r);
      EvalRow row;
      row.scorer = scorer;
      row.ratio = r;
      row.mode = mode;
      row.metrics = deferral_metrics(split, mode);
      row.improvement_ratio = base > 0.0 ? (row.metrics.micro_f1 - base) / base : 0.0;
      row.n_deferred = split.deferred.size();
      row.seed = seed;
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

ClassificationMetrics random_deferral_baseline(std::span<const ScoredPrediction> predictions, double ratio,
                                               MetricMode mode, int trials, std::uint64_t seed) {
  if (trials < 1) throw InvalidArgument("random_deferral_baseline needs trials >= 1");
  if (!(ratio >= 0.0 && ratio < 1.0)) throw InvalidArgument("deferral ratio must lie in [0, 1)");
  const std::size_t n = predictions.size();
  const std::size_t k = deferred_count(ratio, n);
  ClassificationMetrics mean;
  std::vector<std::size_t> order(n);
  for (int t = 0; t < trials; ++t) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_stream(seed, {stream::kRandomDeferral, static_cast<std::uint64_t>(t)});
    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
      std::swap(order[i], order[j]);
    }
    DeferralSplit split;
    for (std::size_t i = 0; i < n; ++i) (i < k ? split.deferred : split.kept).push_back(predictions[order[i]]);
    const auto m = deferral_metrics(split, mode);
    mean.accuracy += m.accuracy;
    mean.micro_f1 += m.micro_f1;
    mean.macro_f1 += m.macro_f1;
  }
  mean.accuracy /= trials;
  mean.micro_f1 /= trials;
  mean.macro_f1 /= trials;
  return mean;
}

void write_report_csv(const EvalReport& report, std::ostream& out) {
  out << "scorer,ratio,mode,accuracy,micro_f1,macro_f1,improvement_ratio,n_deferred,seed\n";
  for (const auto& r : report.rows) {
    out << r.scorer << ',' << fixed(r.ratio, 4) << ',' << to_string(r.mode) << ',' << fixed(r.metrics.accuracy, 6)
        << ',' << fixed(r.metrics.micro_f1, 6) << ',' << fixed(r.metrics.macro_f1, 6) << ','
        << fixed(r.improvement_ratio, 6) << ',' << r.n_deferred << ',' << r.seed << '\n';
  }
}

std::string format_report_table(const EvalReport& report) {
  // Preserve first-appearance order of (scorer, mode) blocks.
  std::vector<std::pair<std::string, MetricMode>> blocks;
  std::vector<double> ratios;
  for (const auto& r : report.rows) {
    std::pair<std::string, MetricMode> key{r.scorer, r.mode};
    if (std::find(blocks.begin(), blocks.end(), key) == blocks.end()) blocks.push_back(key);
    if (std::find(ratios.begin(), ratios.end(), r.ratio) == ratios.end()) ratios.push_back(r.ratio);
  }
  std::sort(ratios.begin(), ratios.end());

  std::ostringstream ss;
  for (const char* metric : {"micro_f1", "macro_f1"}) {
    ss << "Uncertainty ratio (" << metric << ", improved ratio)\n";
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-20s %-15s", "scorer", "mode");
    ss << buf;
    for (double r : ratios) {
      std::snprintf(buf, sizeof buf, " %17s", (fixed(r * 100.0, 0) + "%").c_str());
      ss << buf;
    }
    ss << '\n';
    for (const auto& [scorer, mode] : blocks) {
      std::snprintf(buf, sizeof buf, "%-20s %-15s", scorer.c_str(), std::string(to_string(mode)).c_str());
      ss << buf;
      for (double r : ratios) {
        auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const EvalRow& row) {
          return row.scorer == scorer && row.mode == mode && row.ratio == r;
        });
        if (it == report.rows.end()) {
          std::snprintf(buf, sizeof buf, " %17s", "-");
        } else {
          const bool micro = std::string_view(metric) == "micro_f1";
          const double v = micro ? it->metrics.micro_f1 : it->metrics.macro_f1;
          double improvement = it->improvement_ratio;
          if (!micro) {
            auto base = std::find_if(report.rows.begin(), report.rows.end(), [&](const EvalRow& row) {
              return row.scorer == scorer && row.mode == mode && row.ratio == 0.0;
            });
            improvement = base != report.rows.end() && base->metrics.macro_f1 > 0.0
                              ? (v - base->metrics.macro_f1) / base->metrics.macro_f1
                              : 0.0;
          }
          const std::string cell = fixed(v, 3) + " (" + fixed(improvement * 100.0, 1) + "%)";
          std::snprintf(buf, sizeof buf, " %17s", cell.c_str());
        }
        ss << buf;
      }
      ss << '\n';
    }
    ss << '\n';
  }
  return ss.str();
}

}  // namespace udc
