#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "udc/corpus.hpp"
#include "udc/evaluation.hpp"
#include "udc/metric_loss.hpp"
#include "udc/nn.hpp"

namespace udc {

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 32;
  int max_epochs = 30;
  int patience = 5;
  bool metric_enabled = true;
  MetricConfig metric;
  /// Multiplier on the metric loss in the training objective CE + weight * L_metric.
  double metric_weight = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double ce_loss = 0.0;      // mean over batches
  double metric_loss = 0.0;  // mean over batches, before metric_weight
  ClassificationMetrics valid;
  int single_class_batches = 0;  // batches whose inter term was skipped
};

struct TrainResult {
  Model best;
  int best_epoch = 0;
  double best_valid_micro_f1 = 0.0;
  std::vector<EpochLog> log;
};

/// Mini-batch Adam with per-epoch validation micro-F1 and early stopping.
/// Pure function of (model, data, config). Warnings go to `diagnostics` when set.
TrainResult train(Model model, const EncodedDataset& train_set, const EncodedDataset& valid_set,
                  const TrainConfig& config, std::ostream* diagnostics = nullptr);

/// Deterministic logits for every document.
template <typename T>
BasicTensor<T> predict_logits(const ModelState<T>& model, const EncodedDataset& data);

/// Deterministic representations (dropout is the identity) with labels attached.
template <typename T>
BasicFeatureBatch<T> deterministic_features(const ModelState<T>& model, const EncodedDataset& data);

ClassificationMetrics evaluate_model(const Model& model, const EncodedDataset& data);

void write_training_log_csv(const std::vector<EpochLog>& log, std::ostream& out);

}  // namespace udc
