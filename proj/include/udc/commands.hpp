#pragma once

// The work behind each CLI subcommand. Every command writes into config.out and
// is a pure function of (inputs, effective config, seed).
//
// Run directory layout:
//   effective_config.json   every field materialized
//   vocab.txt, model.ckpt, train_log.csv
//   sweep.csv, sweep/<i>/...            when config.sweep is non-empty
//   scores_<split>_<scorer>.jsonl
//   report.csv, report.txt
//   features_<split>.csv
//   triage_queue.jsonl

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "udc/config.hpp"
#include "udc/metric_loss.hpp"

namespace udc {

enum class SplitName { train, valid, test };
SplitName parse_split_name(std::string_view name);
std::string_view to_string(SplitName split);

/// Dataset loaded and split exactly as every command sees it.
struct PreparedData {
  LabeledDataset full;
  DatasetSplits splits;
  const LabeledDataset& split(SplitName name) const;
};

PreparedData prepare_data(const RunConfig& config);

struct TrainOutcome {
  std::filesystem::path checkpoint;
  double best_valid_micro_f1 = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
};

/// Trains once, or once per sweep point (each in out/sweep/<i>, summarized in
/// out/sweep.csv). Returns the outcome of the main (non-sweep) run or the last
/// sweep point.
TrainOutcome cmd_train(const RunConfig& config, std::ostream& log);

/// Writes one JSONL file per configured scorer and returns their paths.
std::vector<std::filesystem::path> cmd_score(const RunConfig& config, const std::filesystem::path& checkpoint,
                                             SplitName split, std::ostream& log);

/// Reads score files (which must cover the same instances and carry true labels),
/// writes report.csv and report.txt, and returns the report. A "random" block
/// from random_deferral_baseline over the first file is appended.
EvalReport cmd_evaluate(const RunConfig& config, const std::vector<std::filesystem::path>& score_files,
                        std::ostream& log);

/// Writes features_<split>.csv (id, label, f_0 .. f_{d-1}) and returns the
/// distance statistics of the exported rows.
DistanceStatistics cmd_export_features(const RunConfig& config, const std::filesystem::path& checkpoint,
                                       SplitName split, std::ostream& log);

/// Reads an exported features CSV back into a feature batch.
FeatureBatch read_features_csv(const std::filesystem::path& path, std::vector<std::string>* ids = nullptr);

/// Joins scores with the dataset documents and writes the top_ratio most
/// uncertain instances, descending by score, to triage_queue.jsonl.
std::filesystem::path cmd_triage_export(const RunConfig& config, const std::filesystem::path& scores,
                                        double top_ratio, std::ostream& log);

struct ServeOptions {
  std::filesystem::path queue;
  std::filesystem::path labels;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path static_dir;
};

/// Blocks until the server stops. Throws DataError when the bind fails.
void cmd_serve(const ServeOptions& options, std::ostream& log);

void write_effective_config(const RunConfig& config, const std::filesystem::path& dir);

}  // namespace udc
