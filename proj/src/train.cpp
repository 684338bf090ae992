#include "udc/train.hpp"

#include <cstdio>
#include <numeric>
#include <ostream>

#include "udc/error.hpp"
#include "udc/rng.hpp"

namespace udc {

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (metric_enabled && batch_size < 2) throw InvalidArgument("metric loss needs batch_size >= 2");
  if (max_epochs < 1) throw InvalidArgument("max_epochs must be >= 1");
  if (patience < 1) throw InvalidArgument("patience must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw InvalidArgument("Adam betas must lie in [0, 1)");
  }
  if (!(metric_weight >= 0.0)) throw InvalidArgument("metric weight must be >= 0");
  metric.validate();
}

template <typename T>
BasicTensor<T> predict_logits(const ModelState<T>& model, const EncodedDataset& data) {
  return project(model, encode_all(model, std::span<const std::vector<std::int32_t>>(data.sequences)));
}

template <typename T>
BasicFeatureBatch<T> deterministic_features(const ModelState<T>& model, const EncodedDataset& data) {
  BasicFeatureBatch<T> out;
  out.features = encode_all(model, std::span<const std::vector<std::int32_t>>(data.sequences));
  out.labels = data.labels;
  out.dim = static_cast<std::size_t>(model.config.feature_dim());
  return out;
}

ClassificationMetrics evaluate_model(const Model& model, const EncodedDataset& data) {
  const auto logits = predict_logits(model, data);
  std::vector<int> predicted(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) predicted[i] = argmax_index<float>(logits.row(i));
  return classification_metrics(predicted, data.labels);
}

TrainResult train(Model model, const EncodedDataset& train_set, const EncodedDataset& valid_set,
                  const TrainConfig& config, std::ostream* diagnostics) {
  config.validate();
  if (train_set.size() == 0 || valid_set.size() == 0) throw InvalidArgument("train: empty train or validation set");
  model.check_shapes();
  model.zero_grad();

  TrainResult result;
  result.best = model;
  result.best_valid_micro_f1 = -1.0;
  int epochs_without_improvement = 0;
  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::vector<std::vector<std::int32_t>> batch_seqs;
  std::vector<int> batch_labels;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = make_stream(config.seed, {stream::kShuffle, static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle() % (i + 1)]);

    EpochLog log;
    log.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(config.batch_size));
      batch_seqs.clear();
      batch_labels.clear();
      for (std::size_t i = begin; i < end; ++i) {
        batch_seqs.push_back(train_set.sequences[order[i]]);
        batch_labels.push_back(train_set.labels[order[i]]);
      }
      auto tokens = TokenBatch::from_sequences(batch_seqs, model.config.max_len);
      Rng dropout = make_stream(config.seed, {stream::kTrainDropout, static_cast<std::uint64_t>(epoch), batches});
      auto fwd = forward(model, tokens, DropoutMode::train_stochastic, &dropout);
      auto ce = softmax_cross_entropy(fwd.logits, batch_labels);
      log.ce_loss += ce.loss;

      if (config.metric_enabled) {
        fwd.features.labels = batch_labels;
        const auto partition = ClassPartition::from_labels(batch_labels);
        auto ml = metric_loss(fwd.features, partition, config.metric);
        if (ml.inter_skipped) {
          ++log.single_class_batches;
          if (diagnostics) {
            *diagnostics << "warning: epoch " << epoch << " batch " << batches
                         << " holds a single class; inter-class term skipped\n";
          }
        }
        log.metric_loss += ml.loss;
        if (config.metric_weight != 1.0) {
          for (auto& g : ml.dfeatures.values()) g *= static_cast<float>(config.metric_weight);
        }
        backward<float>(model, fwd.cache, ce.grad, config.metric_weight == 0.0 ? nullptr : &ml.dfeatures);
      } else {
        backward<float>(model, fwd.cache, ce.grad, nullptr);
      }
      auto params = model.trainable_parameters();
      adam_step<float>(params, config.adam);
      ++batches;
    }
    log.ce_loss /= static_cast<double>(batches);
    log.metric_loss /= static_cast<double>(batches);
    log.valid = evaluate_model(model, valid_set);
    result.log.push_back(log);

    if (log.valid.micro_f1 > result.best_valid_micro_f1) {
      result.best_valid_micro_f1 = log.valid.micro_f1;
      result.best_epoch = epoch;
      result.best = model;
      epochs_without_improvement = 0;
    } else if (++epochs_without_improvement >= config.patience) {
      break;
    }
  }
  return result;
}

void write_training_log_csv(const std::vector<EpochLog>& log, std::ostream& out) {
  out << "epoch,ce_loss,metric_loss,valid_accuracy,valid_micro_f1,valid_macro_f1,single_class_batches\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%d\n", e.epoch, e.ce_loss, e.metric_loss,
                  e.valid.accuracy, e.valid.micro_f1, e.valid.macro_f1, e.single_class_batches);
    out << buf;
  }
}

template BasicTensor<float> predict_logits<float>(const ModelState<float>&, const EncodedDataset&);
template BasicTensor<double> predict_logits<double>(const ModelState<double>&, const EncodedDataset&);
template BasicFeatureBatch<float> deterministic_features<float>(const ModelState<float>&, const EncodedDataset&);
template BasicFeatureBatch<double> deterministic_features<double>(const ModelState<double>&, const EncodedDataset&);

}  // namespace udc
