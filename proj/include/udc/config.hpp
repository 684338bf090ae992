#pragma once

// Run configuration shared by every CLI subcommand. Stored as JSON; missing keys
// take the defaults below and the effective config written next to each run has
// every field materialized.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "udc/corpus.hpp"
#include "udc/evaluation.hpp"
#include "udc/metric_loss.hpp"
#include "udc/nn.hpp"
#include "udc/train.hpp"
#include "udc/uncertainty.hpp"

namespace udc {

struct DatasetConfig {
  std::string path;
  DatasetFormat format = DatasetFormat::jsonl;
  bool strip_headers = false;
  std::optional<int> num_classes;
  int min_count = 2;
};

struct EmbeddingConfig {
  std::string path;  // GloVe text file; empty means random initialization
  bool freeze = false;
};

struct MetricSettings {
  bool enable = true;
  MetricConfig loss;
  double weight = 1.0;
};

struct SweepPoint {
  double margin = 0.5;
  double lambda_weight = 0.1;
};

struct TriageConfig {
  double top_ratio = 0.2;
  ScorerKind scorer = ScorerKind::dropout_entropy;
};

struct RunConfig {
  DatasetConfig dataset;
  SplitSpec split;
  EmbeddingConfig embeddings;
  EncoderConfig encoder;
  TrainConfig train;
  MetricSettings metric;
  std::vector<ScorerConfig> scorers;
  DeferralPolicy deferral;
  int random_baseline_trials = 100;
  std::vector<SweepPoint> sweep;
  TriageConfig triage;
  std::string out = "run";
  std::uint64_t seed = 42;

  RunConfig();

  /// Pushes the run seed and metric settings into the nested configs.
  void propagate();
  void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& config);
/// Unknown keys are rejected so that typos do not silently fall back to defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

}  // namespace udc
