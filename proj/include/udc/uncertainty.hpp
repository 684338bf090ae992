#pragma once

// Uncertainty scorers. Every scorer reports "higher == more uncertain".
//
//   dropout_entropy   MC dropout argmax samples -> bin count -> keep the top
//                     floor(2c/3) bins when c > 10 -> normalize -> entropy
//   dropout_baseline  entropy of the mean MC softmax
//   pl_variance       negated variance of the deterministic logits
//   distance_knn      1 - exp(-D)-weighted label agreement among the k nearest
//                     training representations

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "udc/corpus.hpp"
#include "udc/nn.hpp"

namespace udc {

enum class ScorerKind { dropout_entropy, dropout_baseline, pl_variance, distance_knn };

ScorerKind parse_scorer_kind(std::string_view name);
std::string_view to_string(ScorerKind kind);

struct ScorerConfig {
  ScorerKind kind = ScorerKind::dropout_entropy;
  int num_samples = 100;
  int knn_k = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Argmax class of each MC dropout pass: row i holds the samples of instance i.
struct PredictionSamples {
  std::vector<int> sampled_classes;  // [num_instances x num_samples]
  std::size_t num_instances = 0;
  std::size_t num_samples = 0;
  int num_classes = 0;

  std::span<const int> row(std::size_t i) const { return {sampled_classes.data() + i * num_samples, num_samples}; }
};

struct UncertaintyScore {
  std::string instance_id;
  double value = 0.0;
  int predicted_class = 0;
  ScorerKind scorer = ScorerKind::dropout_entropy;
  std::vector<int> histogram;  // raw MC bin counts; empty for single-pass scorers
};

/// Sample t of instance i uses the stream derive_seed(seed, {MC, i, t}), so the
/// result does not depend on batching or thread count.
PredictionSamples mc_sample(const Model& model, const EncodedDataset& documents, int num_samples, std::uint64_t seed);

std::vector<int> bin_count(std::span<const int> samples, int num_classes);

/// For num_classes > 10 keeps the floor(2c/3) largest bins (ties: lower class
/// index first) and zeroes the rest; otherwise returns the input unchanged.
std::vector<int> mask_top_m(std::span<const int> histogram, int num_classes);

/// Number of bins mask_top_m keeps.
int kept_bins(int num_classes);

std::vector<double> normalize(std::span<const int> histogram);

/// Natural-log entropy with 0 log 0 = 0.
double entropy(std::span<const double> probabilities);

/// Dropout-entropy score of one row of MC samples.
double dropout_entropy(std::span<const int> samples, int num_classes);

std::vector<UncertaintyScore> de_score(const Model& model, const EncodedDataset& documents, const ScorerConfig& config);
std::vector<UncertaintyScore> dropout_baseline_score(const Model& model, const EncodedDataset& documents,
                                                     const ScorerConfig& config);
std::vector<UncertaintyScore> pl_variance_score(const Model& model, const EncodedDataset& documents);

/// Population variance of one logit vector.
double logit_variance(std::span<const float> logits);

/// k-NN confidence against precomputed deterministic training representations.
std::vector<UncertaintyScore> distance_confidence_score(const Model& model, const EncodedDataset& documents,
                                                        const FeatureBatch& train_features,
                                                        const ScorerConfig& config);

/// 1 - sum_{labels == predicted} exp(-D) / sum exp(-D) over the k nearest rows
/// of `train_features` (ties: lower row index first).
double knn_uncertainty(std::span<const float> feature, int predicted_class, const FeatureBatch& train_features,
                       int k);

/// Runs the scorer named by config.kind. `train_features` is required for distance_knn.
std::vector<UncertaintyScore> score(const Model& model, const EncodedDataset& documents, const ScorerConfig& config,
                                    const FeatureBatch* train_features = nullptr);

/// One JSON object per line: id, scorer, score, predicted_class, plus histogram
/// and true_label when present.
void write_scores_jsonl(std::span<const UncertaintyScore> scores, std::span<const int> true_labels,
                        std::ostream& out);

struct ScoreRecord {
  UncertaintyScore score;
  std::optional<int> true_label;
};

std::vector<ScoreRecord> read_scores_jsonl(std::istream& in, const std::string& source);

}  // namespace udc
