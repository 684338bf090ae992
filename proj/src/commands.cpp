#include "udc/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "udc/checkpoint.hpp"
#include "udc/error.hpp"
#include "udc/evaluation.hpp"
#include "udc/triage.hpp"

namespace udc {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

RunConfig with_dataset_classes(RunConfig config, const PreparedData& data) {
  config.encoder.num_classes = data.full.num_classes;
  return config;
}

EmbeddingMatrix make_embeddings(const RunConfig& config, const Vocabulary& vocab) {
  if (config.embeddings.path.empty()) return random_embeddings(vocab, config.encoder.embed_dim, config.seed);
  return load_pretrained_embeddings(config.embeddings.path, vocab, config.encoder.embed_dim, config.seed);
}

TrainOutcome train_once(const RunConfig& config, const PreparedData& data, std::ostream& log) {
  const fs::path dir = config.out;
  fs::create_directories(dir);
  write_effective_config(config, dir);

  const Vocabulary vocab = build_vocab(data.splits.train, config.dataset.min_count);
  vocab.save(dir / "vocab.txt");
  const auto embeddings = make_embeddings(config, vocab);
  Model model = init_model<float>(config.encoder, embeddings, config.seed);
  model.freeze_embeddings = config.embeddings.freeze;

  const auto train_set = encode_dataset(data.splits.train, vocab, config.encoder.max_len);
  const auto valid_set = encode_dataset(data.splits.valid, vocab, config.encoder.max_len);
  log << "training on " << train_set.size() << " documents (" << valid_set.size() << " validation), vocabulary "
      << vocab.size() << ", " << config.encoder.num_classes << " classes\n";
  auto result = train(std::move(model), train_set, valid_set, config.train, &log);

  {
    auto out = open_out(dir / "train_log.csv");
    write_training_log_csv(result.log, out);
  }
  TrainOutcome outcome;
  outcome.checkpoint = dir / "model.ckpt";
  save_checkpoint(result.best, outcome.checkpoint);
  outcome.best_valid_micro_f1 = result.best_valid_micro_f1;
  outcome.best_epoch = result.best_epoch;
  outcome.epochs_run = static_cast<int>(result.log.size());
  for (const auto& e : result.log) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %2d  ce %.4f  metric %.4f  valid micro-F1 %.4f\n", e.epoch, e.ce_loss,
                  e.metric_loss, e.valid.micro_f1);
    log << buf;
  }
  log << "best epoch " << outcome.best_epoch << ", checkpoint " << outcome.checkpoint.string() << '\n';
  return outcome;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

SplitName parse_split_name(std::string_view name) {
  if (name == "train") return SplitName::train;
  if (name == "valid") return SplitName::valid;
  if (name == "test") return SplitName::test;
  throw InvalidArgument("unknown split: " + std::string(name));
}

std::string_view to_string(SplitName split) {
  switch (split) {
    case SplitName::train: return "train";
    case SplitName::valid: return "valid";
    case SplitName::test: return "test";
  }
  return "?";
}

const LabeledDataset& PreparedData::split(SplitName name) const {
  switch (name) {
    case SplitName::train: return splits.train;
    case SplitName::valid: return splits.valid;
    case SplitName::test: return splits.test;
  }
  return splits.test;
}

PreparedData prepare_data(const RunConfig& config) {
  if (config.dataset.path.empty()) throw InvalidArgument("dataset.path is not set");
  LoadOptions options;
  options.format = config.dataset.format;
  options.strip_headers = config.dataset.strip_headers;
  options.num_classes = config.dataset.num_classes;
  PreparedData data;
  data.full = load_dataset(config.dataset.path, options);
  data.splits = split_dataset(data.full, config.split);
  return data;
}

void write_effective_config(const RunConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  auto out = open_out(dir / "effective_config.json");
  out << to_json(config).dump(2) << '\n';
}

TrainOutcome cmd_train(const RunConfig& base, std::ostream& log) {
  base.validate();
  const PreparedData data = prepare_data(base);
  const RunConfig config = with_dataset_classes(base, data);
  if (config.sweep.empty()) return train_once(config, data, log);

  fs::create_directories(config.out);
  write_effective_config(config, config.out);
  auto summary = open_out(fs::path(config.out) / "sweep.csv");
  summary << "index,margin,lambda,best_epoch,valid_micro_f1,test_accuracy,test_macro_f1,checkpoint\n";
  TrainOutcome last;
  for (std::size_t i = 0; i < config.sweep.size(); ++i) {
    RunConfig point = config;
    point.sweep.clear();
    point.metric.loss.margin = config.sweep[i].margin;
    point.metric.loss.lambda_weight = config.sweep[i].lambda_weight;
    point.out = (fs::path(config.out) / "sweep" / std::to_string(i)).string();
    point.propagate();
    log << "sweep point " << i << ": margin " << point.metric.loss.margin << ", lambda "
        << point.metric.loss.lambda_weight << '\n';
    last = train_once(point, data, log);
    const Model best = load_checkpoint(last.checkpoint);
    const auto test = encode_dataset(data.splits.test, Vocabulary::load(fs::path(point.out) / "vocab.txt"),
                                     point.encoder.max_len);
    const auto m = evaluate_model(best, test);
    summary << i << ',' << format_double(point.metric.loss.margin) << ','
            << format_double(point.metric.loss.lambda_weight) << ',' << last.best_epoch << ','
            << format_double(last.best_valid_micro_f1) << ',' << format_double(m.accuracy) << ','
            << format_double(m.macro_f1) << ',' << last.checkpoint.string() << '\n';
  }
  return last;
}

namespace {

struct LoadedRun {
  RunConfig config;
  PreparedData data;
  Vocabulary vocab;
  Model model;
};

LoadedRun load_run(const RunConfig& base, const fs::path& checkpoint) {
  base.validate();
  LoadedRun run{base, prepare_data(base), Vocabulary(), Model()};
  run.config = with_dataset_classes(base, run.data);
  const fs::path vocab_path = checkpoint.parent_path() / "vocab.txt";
  run.vocab = Vocabulary::load(vocab_path);
  run.model = load_checkpoint(checkpoint, run.config.encoder);
  if (run.model.vocab_size != run.vocab.size()) {
    throw ShapeError("checkpoint vocabulary size " + std::to_string(run.model.vocab_size) + " does not match " +
                     vocab_path.string() + " (" + std::to_string(run.vocab.size()) + ")");
  }
  return run;
}

}  // namespace

std::vector<fs::path> cmd_score(const RunConfig& base, const fs::path& checkpoint, SplitName split,
                                std::ostream& log) {
  const LoadedRun run = load_run(base, checkpoint);
  const auto& config = run.config;
  const auto docs = encode_dataset(run.data.split(split), run.vocab, config.encoder.max_len);
  fs::create_directories(config.out);

  std::optional<FeatureBatch> train_features;
  std::vector<fs::path> written;
  for (const auto& scorer : config.scorers) {
    if (scorer.kind == ScorerKind::distance_knn && !train_features) {
      train_features = deterministic_features(run.model, encode_dataset(run.data.splits.train, run.vocab,
                                                                        config.encoder.max_len));
    }
    const auto scores = score(run.model, docs, scorer, train_features ? &*train_features : nullptr);
    const fs::path path =
        fs::path(config.out) / ("scores_" + std::string(to_string(split)) + "_" + std::string(to_string(scorer.kind)) +
                                ".jsonl");
    auto out = open_out(path);
    write_scores_jsonl(scores, docs.labels, out);
    log << "wrote " << scores.size() << " scores to " << path.string() << '\n';
    written.push_back(path);
  }
  return written;
}

namespace {

std::vector<ScoreRecord> read_score_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open score file " + path.string());
  return read_scores_jsonl(in, path.string());
}

std::vector<ScoredPrediction> to_predictions(const std::vector<ScoreRecord>& records, const fs::path& source) {
  std::vector<ScoredPrediction> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.true_label) throw DataError(source.string() + ": record " + r.score.instance_id + " has no true_label");
    out.push_back({r.score.instance_id, r.score.predicted_class, *r.true_label, r.score.value});
  }
  return out;
}

}  // namespace

EvalReport cmd_evaluate(const RunConfig& config, const std::vector<fs::path>& score_files, std::ostream& log) {
  config.deferral.validate();
  if (score_files.empty()) throw InvalidArgument("evaluate: no score files given");
  EvalReport report;
  std::set<std::string> reference_ids;
  std::vector<ScoredPrediction> first;
  for (std::size_t f = 0; f < score_files.size(); ++f) {
    const auto records = read_score_file(score_files[f]);
    if (records.empty()) throw DataError(score_files[f].string() + ": no records");
    auto predictions = to_predictions(records, score_files[f]);
    std::set<std::string> ids;
    for (const auto& p : predictions) ids.insert(p.instance_id);
    if (ids.size() != predictions.size()) throw DataError(score_files[f].string() + ": duplicate instance ids");
    if (f == 0) {
      reference_ids = ids;
      first = predictions;
    } else if (ids != reference_ids) {
      throw DataError(score_files[f].string() + ": instance set differs from " + score_files[0].string());
    }
    const std::string scorer(to_string(records.front().score.scorer));
    auto part = evaluate(predictions, config.deferral, scorer, config.seed);
    report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
  }
  for (MetricMode mode : config.deferral.modes) {
    const double base =
        random_deferral_baseline(first, 0.0, mode, config.random_baseline_trials, config.seed).micro_f1;
    for (double r : config.deferral.ratios) {
      EvalRow row;
      row.scorer = "random";
      row.ratio = r;
      row.mode = mode;
      row.metrics = random_deferral_baseline(first, r, mode, config.random_baseline_trials, config.seed);
      row.improvement_ratio = base > 0.0 ? (row.metrics.micro_f1 - base) / base : 0.0;
      row.n_deferred = deferred_count(r, first.size());
      row.seed = config.seed;
      report.rows.push_back(row);
    }
  }

  fs::create_directories(config.out);
  {
    auto out = open_out(fs::path(config.out) / "report.csv");
    write_report_csv(report, out);
  }
  const std::string table = format_report_table(report);
  {
    auto out = open_out(fs::path(config.out) / "report.txt");
    out << table;
  }
  log << table;
  return report;
}

DistanceStatistics cmd_export_features(const RunConfig& base, const fs::path& checkpoint, SplitName split,
                                       std::ostream& log) {
  const LoadedRun run = load_run(base, checkpoint);
  const auto& ds = run.data.split(split);
  const auto docs = encode_dataset(ds, run.vocab, run.config.encoder.max_len);
  const auto features = deterministic_features(run.model, docs);
  fs::create_directories(run.config.out);
  const fs::path path = fs::path(run.config.out) / ("features_" + std::string(to_string(split)) + ".csv");
  {
    auto out = open_out(path);
    out << "id,label";
    for (std::size_t d = 0; d < features.dim; ++d) out << ",f_" << d;
    out << '\n';
    for (std::size_t i = 0; i < features.size(); ++i) {
      // Ids are quoted so that commas and quotes survive the round trip.
      std::string id = docs.ids[i];
      std::string quoted = "\"";
      for (char ch : id) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      quoted += '"';
      out << quoted << ',' << features.labels[i];
      for (float v : features.features.row(i)) out << ',' << format_double(v);
      out << '\n';
    }
  }
  const auto stats = distance_statistics(features, ClassPartition::from_labels(features.labels));
  log << "wrote " << features.size() << " feature rows to " << path.string() << '\n';
  if (stats.ok()) {
    log << "distance statistics: mean_intra " << format_double(*stats.mean_intra) << " mean_inter "
        << format_double(*stats.mean_inter) << " ratio " << format_double(*stats.ratio) << '\n';
  } else {
    log << "distance statistics: undefined (need two classes and at least one intra-class pair)\n";
  }
  return stats;
}

FeatureBatch read_features_csv(const fs::path& path, std::vector<std::string>* ids) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty features file");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (columns < 2) throw FormatError(path.string() + ": header has no feature columns");
  FeatureBatch batch;
  batch.dim = columns - 1;
  std::vector<float> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0;
    std::string id;
    if (line[0] == '"') {
      pos = 1;
      while (pos < line.size()) {
        if (line[pos] == '"') {
          if (pos + 1 < line.size() && line[pos + 1] == '"') {
            id += '"';
            pos += 2;
            continue;
          }
          ++pos;
          break;
        }
        id += line[pos++];
      }
    } else {
      pos = line.find(',');
      id = line.substr(0, pos);
    }
    if (pos >= line.size() || line[pos] != ',') throw FormatError(path.string() + ": malformed row " + id);
    std::istringstream rest(line.substr(pos + 1));
    std::string field;
    std::getline(rest, field, ',');
    batch.labels.push_back(std::stoi(field));
    std::size_t n = 0;
    while (std::getline(rest, field, ',')) {
      values.push_back(std::strtof(field.c_str(), nullptr));
      ++n;
    }
    if (n != batch.dim) throw FormatError(path.string() + ": row " + id + " has " + std::to_string(n) + " features");
    if (ids) ids->push_back(id);
    ++rows;
  }
  batch.features = Tensor({rows, batch.dim}, std::move(values));
  return batch;
}

fs::path cmd_triage_export(const RunConfig& config, const fs::path& scores_path, double top_ratio, std::ostream& log) {
  if (!(top_ratio >= 0.0 && top_ratio < 1.0)) throw InvalidArgument("top ratio must lie in [0, 1)");
  const PreparedData data = prepare_data(config);
  std::map<std::string, const Document*> documents;
  for (const auto& d : data.full.documents) documents[d.id] = &d;

  const auto records = read_score_file(scores_path);
  std::vector<const ScoreRecord*> order;
  for (const auto& r : records) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const ScoreRecord* a, const ScoreRecord* b) {
    if (a->score.value != b->score.value) return a->score.value > b->score.value;
    return a->score.instance_id < b->score.instance_id;
  });
  const std::size_t n = deferred_count(top_ratio, order.size());

  TriageQueueFile queue;
  queue.num_classes = data.full.num_classes;
  queue.class_names = data.full.class_names;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = *order[i];
    auto it = documents.find(r.score.instance_id);
    if (it == documents.end()) throw DataError("score record " + r.score.instance_id + " has no matching document");
    TriageItem item;
    item.instance_id = r.score.instance_id;
    item.text = it->second->text;
    item.score = r.score.value;
    item.predicted_class = r.score.predicted_class;
    item.true_label = r.true_label;
    const auto& hist = r.score.histogram;
    if (!hist.empty()) {
      double total = 0.0;
      for (int c : hist) total += c;
      std::vector<int> classes(hist.size());
      for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
      std::stable_sort(classes.begin(), classes.end(), [&](int a, int b) { return hist[a] > hist[b]; });
      for (std::size_t k = 0; k < std::min<std::size_t>(3, classes.size()); ++k) {
        if (hist[classes[k]] == 0) break;
        item.top3.push_back({classes[k], hist[classes[k]] / total});
      }
    } else {
      item.top3.push_back({item.predicted_class, 1.0});
    }
    queue.items.push_back(std::move(item));
  }
  fs::create_directories(config.out);
  const fs::path path = fs::path(config.out) / "triage_queue.jsonl";
  auto out = open_out(path);
  write_triage_queue(queue, out);
  log << "wrote " << queue.items.size() << " of " << records.size() << " instances to " << path.string() << '\n';
  return path;
}

void cmd_serve(const ServeOptions& options, std::ostream& log) {
  TriageStore store(read_triage_queue(options.queue), options.labels);
  std::optional<fs::path> static_dir;
  if (!options.static_dir.empty()) static_dir = options.static_dir;
  TriageServer server(store, static_dir);
  log << "serving " << store.metrics().total << " items on http://" << options.host << ':' << options.port << '\n';
  log.flush();
  if (!server.listen(options.host, options.port)) {
    throw DataError("cannot bind " + options.host + ":" + std::to_string(options.port));
  }
}

}  // namespace udc
