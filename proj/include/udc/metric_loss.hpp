#pragma once

// Metric loss over a batch of representations: an intra-class term pulling
// members of each class together and a hinge term pushing classes at least
// `margin` apart, with D(a, b) = ||a - b||^2 / d.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "udc/tensor.hpp"

namespace udc {

struct MetricConfig {
  double margin = 0.5;
  double lambda_weight = 0.1;

  void validate() const;
};

/// Rows of a feature batch grouped by label, classes in ascending order.
struct ClassPartition {
  std::map<int, std::vector<std::size_t>> subsets;

  static ClassPartition from_labels(std::span<const int> labels);
  std::size_t num_classes_present() const { return subsets.size(); }
  const std::vector<std::size_t>& members(int k) const;
};

/// (1/dim) * sum (a_i - b_i)^2.
template <typename T>
double pairwise_distance(std::span<const T> a, std::span<const T> b, std::size_t dim);

/// Mean distance over the unordered pairs of class k; 0 when |S_k| < 2.
template <typename T>
double intra_loss(const BasicFeatureBatch<T>& batch, const ClassPartition& partition, int k);

/// Mean hinge max(0, margin - D) over all cross pairs of classes p and q.
template <typename T>
double inter_loss(const BasicFeatureBatch<T>& batch, const ClassPartition& partition, int p, int q,
                  double margin);

template <typename T>
struct MetricLossResult {
  double loss = 0.0;
  double intra_total = 0.0;  // sum_k intra(k)
  double inter_total = 0.0;  // sum_k sum_{i != k} inter(k, i), before lambda
  BasicTensor<T> dfeatures;  // d loss / d features
  bool inter_skipped = false;  // fewer than two classes present
};

/// sum_k { intra(k) + lambda * sum_{i != k} inter(k, i) } over the classes present.
/// The ordered double sum counts every class pair twice. The hinge has zero
/// subgradient at D == margin.
template <typename T>
MetricLossResult<T> metric_loss(const BasicFeatureBatch<T>& batch, const ClassPartition& partition,
                                const MetricConfig& config);

struct DistanceStatistics {
  std::optional<double> mean_intra;  // unset when no class has two members
  std::optional<double> mean_inter;  // unset when fewer than two classes
  std::optional<double> ratio;       // mean_intra / mean_inter
  std::size_t intra_pairs = 0;
  std::size_t inter_pairs = 0;

  bool ok() const { return ratio.has_value(); }
};

template <typename T>
DistanceStatistics distance_statistics(const BasicFeatureBatch<T>& batch, const ClassPartition& partition);

}  // namespace udc
