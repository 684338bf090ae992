#pragma once

// Brute-force selective evaluation, written without the library's ranking or
// metric code: ranks by pairwise comparison counts and scores with an explicit
// confusion matrix.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "udc/evaluation.hpp"
#include "udc/rng.hpp"

namespace udc::testing {

struct OracleMetrics {
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

inline OracleMetrics oracle_metrics(const std::vector<int>& predicted, const std::vector<int>& truth) {
  int classes = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) classes = std::max({classes, truth[i] + 1, predicted[i] + 1});
  std::vector<std::vector<std::size_t>> confusion(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) ++confusion[truth[i]][predicted[i]];
  OracleMetrics m;
  m.total = truth.size();
  for (int c = 0; c < classes; ++c) m.correct += confusion[c][c];
  m.accuracy = static_cast<double>(m.correct) / static_cast<double>(m.total);
  // Single-label micro-F1: every error is one FP and one FN.
  m.micro_f1 = 2.0 * static_cast<double>(m.correct) / (2.0 * static_cast<double>(m.total));
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    std::size_t row = 0, col = 0;
    for (int o = 0; o < classes; ++o) {
      row += confusion[c][o];
      col += confusion[o][c];
    }
    if (row == 0) continue;  // class absent from the truth
    ++present;
    const std::size_t tp = confusion[c][c];
    const std::size_t fn = row - tp;
    const std::size_t fp = col - tp;
    sum += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  m.macro_f1 = sum / present;
  return m;
}

/// floor(ratio * n) for ratios given to four decimals, in integer arithmetic.
inline std::size_t oracle_deferred_count(double ratio, std::size_t n) {
  const auto scaled = static_cast<std::size_t>(std::llround(ratio * 10000.0));
  return scaled * n / 10000;
}

struct OracleResult {
  OracleMetrics metrics;
  std::size_t deferred = 0;
};

inline OracleResult oracle_evaluate(const std::vector<ScoredPrediction>& items, double ratio, MetricMode mode) {
  const std::size_t n = items.size();
  const std::size_t k = oracle_deferred_count(ratio, n);
  std::vector<int> predicted, truth;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ahead = 0;  // items ranked as more uncertain than i
    for (std::size_t j = 0; j < n; ++j) {
      if (items[j].score > items[i].score ||
          (items[j].score == items[i].score && items[j].instance_id < items[i].instance_id)) {
        ++ahead;
      }
    }
    const bool deferred = ahead < k;
    if (deferred && mode == MetricMode::remaining_only) continue;
    truth.push_back(items[i].true_class);
    predicted.push_back(deferred ? items[i].true_class : items[i].predicted_class);
  }
  return {oracle_metrics(predicted, truth), k};
}

/// Random predictions over 2-6 classes with a random error rate; scores are
/// quantized so that ties (and the id tie-break) occur.
inline std::vector<ScoredPrediction> random_fixture(std::uint64_t seed, std::size_t n) {
  Rng rng = make_stream(seed, {400});
  const int classes = 2 + static_cast<int>(rng() % 5);
  const double error_rate = 0.05 + 0.4 * uniform01(rng);
  std::vector<ScoredPrediction> items;
  for (std::size_t i = 0; i < n; ++i) {
    ScoredPrediction p;
    p.instance_id = "i" + std::to_string(rng() % 100000) + "_" + std::to_string(i);
    p.true_class = static_cast<int>(rng() % classes);
    const bool wrong = uniform01(rng) < error_rate;
    p.predicted_class = wrong ? (p.true_class + 1 + static_cast<int>(rng() % (classes - 1))) % classes : p.true_class;
    // Wrong predictions lean towards higher scores, as a useful scorer would.
    p.score = std::floor((uniform01(rng) + (wrong ? 0.3 : 0.0)) * 20.0) / 20.0;
    items.push_back(std::move(p));
  }
  return items;
}

/// Score 1 for wrong predictions and 0 for right ones.
inline std::vector<ScoredPrediction> with_oracle_scores(std::vector<ScoredPrediction> items) {
  for (auto& p : items) p.score = p.predicted_class == p.true_class ? 0.0 : 1.0;
  return items;
}

}  // namespace udc::testing
