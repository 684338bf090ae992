#include "udc/config.hpp"

#include <fstream>
#include <set>

#include "udc/error.hpp"

namespace udc {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument("config: '" + where + "' must be an object");
  std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw InvalidArgument("config: unknown key '" + where + "." + k + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

RunConfig::RunConfig() {
  scorers = {ScorerConfig{ScorerKind::dropout_entropy}, ScorerConfig{ScorerKind::dropout_baseline},
             ScorerConfig{ScorerKind::pl_variance}, ScorerConfig{ScorerKind::distance_knn}};
  propagate();
}

void RunConfig::propagate() {
  split.seed = seed;
  train.seed = seed;
  train.metric_enabled = metric.enable;
  train.metric = metric.loss;
  train.metric_weight = metric.weight;
  for (auto& s : scorers) s.seed = seed;
}

void RunConfig::validate() const {
  split.validate();
  encoder.validate();
  train.validate();
  deferral.validate();
  for (const auto& s : scorers) s.validate();
  if (dataset.min_count < 1) throw InvalidArgument("dataset.min_count must be >= 1");
  if (random_baseline_trials < 1) throw InvalidArgument("random_baseline_trials must be >= 1");
  if (!(triage.top_ratio >= 0.0 && triage.top_ratio < 1.0)) throw InvalidArgument("triage.top_ratio must lie in [0, 1)");
  for (const auto& p : sweep) MetricConfig{p.margin, p.lambda_weight}.validate();
}

ordered_json to_json(const EncoderConfig& c) {
  ordered_json j;
  j["kind"] = "cnn";
  j["embed_dim"] = c.embed_dim;
  j["kernel_sizes"] = c.kernel_sizes;
  j["filters_per_kernel"] = c.filters_per_kernel;
  j["dropout_p"] = c.dropout_p;
  j["max_len"] = c.max_len;
  j["num_classes"] = c.num_classes;
  return j;
}

EncoderConfig encoder_config_from_json(const json& j) {
  reject_unknown(j, {"kind", "embed_dim", "kernel_sizes", "filters_per_kernel", "dropout_p", "max_len", "num_classes"},
                 "encoder");
  EncoderConfig c;
  if (j.contains("kind") && j["kind"].get<std::string>() != "cnn") {
    throw InvalidArgument("encoder.kind: only 'cnn' is implemented");
  }
  read(j, "embed_dim", c.embed_dim);
  read(j, "kernel_sizes", c.kernel_sizes);
  read(j, "filters_per_kernel", c.filters_per_kernel);
  read(j, "dropout_p", c.dropout_p);
  read(j, "max_len", c.max_len);
  read(j, "num_classes", c.num_classes);
  return c;
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["out"] = c.out;
  auto& d = j["dataset"];
  d["path"] = c.dataset.path;
  d["format"] = to_string(c.dataset.format);
  d["strip_headers"] = c.dataset.strip_headers;
  d["num_classes"] = c.dataset.num_classes ? json(*c.dataset.num_classes) : json(nullptr);
  d["min_count"] = c.dataset.min_count;
  auto& s = j["split"];
  s["train"] = c.split.train_fraction;
  s["valid"] = c.split.valid_fraction;
  s["test"] = c.split.test_fraction;
  j["embeddings"] = {{"path", c.embeddings.path}, {"freeze", c.embeddings.freeze}};
  j["encoder"] = to_json(c.encoder);
  auto& t = j["train"];
  t["batch_size"] = c.train.batch_size;
  t["learning_rate"] = c.train.adam.learning_rate;
  t["beta1"] = c.train.adam.beta1;
  t["beta2"] = c.train.adam.beta2;
  t["epsilon"] = c.train.adam.epsilon;
  t["max_epochs"] = c.train.max_epochs;
  t["patience"] = c.train.patience;
  j["metric"] = {{"enable", c.metric.enable},
                 {"margin", c.metric.loss.margin},
                 {"lambda", c.metric.loss.lambda_weight},
                 {"weight", c.metric.weight}};
  auto& sc = j["scorers"];
  sc = ordered_json::array();
  for (const auto& x : c.scorers) {
    sc.push_back({{"kind", to_string(x.kind)}, {"num_samples", x.num_samples}, {"knn_k", x.knn_k}});
  }
  auto& df = j["deferral"];
  df["ratios"] = c.deferral.ratios;
  df["modes"] = ordered_json::array();
  for (auto m : c.deferral.modes) df["modes"].push_back(to_string(m));
  df["random_baseline_trials"] = c.random_baseline_trials;
  j["sweep"] = ordered_json::array();
  for (const auto& p : c.sweep) j["sweep"].push_back({{"margin", p.margin}, {"lambda", p.lambda_weight}});
  j["triage"] = {{"top_ratio", c.triage.top_ratio}, {"scorer", to_string(c.triage.scorer)}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, {"seed", "out", "dataset", "split", "embeddings", "encoder", "train", "metric", "scorers",
                     "deferral", "sweep", "triage"},
                 "");
  RunConfig c;
  try {
    read(j, "seed", c.seed);
    read(j, "out", c.out);
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      reject_unknown(d, {"path", "format", "strip_headers", "num_classes", "min_count"}, "dataset");
      read(d, "path", c.dataset.path);
      if (d.contains("format")) c.dataset.format = parse_dataset_format(d["format"].get<std::string>());
      read(d, "strip_headers", c.dataset.strip_headers);
      if (d.contains("num_classes") && !d["num_classes"].is_null()) c.dataset.num_classes = d["num_classes"].get<int>();
      read(d, "min_count", c.dataset.min_count);
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      reject_unknown(s, {"train", "valid", "test"}, "split");
      read(s, "train", c.split.train_fraction);
      read(s, "valid", c.split.valid_fraction);
      read(s, "test", c.split.test_fraction);
    }
    if (j.contains("embeddings")) {
      const auto& e = j["embeddings"];
      reject_unknown(e, {"path", "freeze"}, "embeddings");
      read(e, "path", c.embeddings.path);
      read(e, "freeze", c.embeddings.freeze);
    }
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j["encoder"]);
    if (j.contains("train")) {
      const auto& t = j["train"];
      reject_unknown(t, {"batch_size", "learning_rate", "beta1", "beta2", "epsilon", "max_epochs", "patience"}, "train");
      read(t, "batch_size", c.train.batch_size);
      read(t, "learning_rate", c.train.adam.learning_rate);
      read(t, "beta1", c.train.adam.beta1);
      read(t, "beta2", c.train.adam.beta2);
      read(t, "epsilon", c.train.adam.epsilon);
      read(t, "max_epochs", c.train.max_epochs);
      read(t, "patience", c.train.patience);
    }
    if (j.contains("metric")) {
      const auto& m = j["metric"];
      reject_unknown(m, {"enable", "margin", "lambda", "weight"}, "metric");
      read(m, "enable", c.metric.enable);
      read(m, "margin", c.metric.loss.margin);
      read(m, "lambda", c.metric.loss.lambda_weight);
      read(m, "weight", c.metric.weight);
    }
    if (j.contains("scorers")) {
      c.scorers.clear();
      for (const auto& x : j["scorers"]) {
        reject_unknown(x, {"kind", "num_samples", "knn_k"}, "scorers[]");
        ScorerConfig s;
        s.kind = parse_scorer_kind(x.at("kind").get<std::string>());
        read(x, "num_samples", s.num_samples);
        read(x, "knn_k", s.knn_k);
        c.scorers.push_back(s);
      }
    }
    if (j.contains("deferral")) {
      const auto& d = j["deferral"];
      reject_unknown(d, {"ratios", "modes", "random_baseline_trials"}, "deferral");
      read(d, "ratios", c.deferral.ratios);
      if (d.contains("modes")) {
        c.deferral.modes.clear();
        for (const auto& m : d["modes"]) c.deferral.modes.push_back(parse_metric_mode(m.get<std::string>()));
      }
      read(d, "random_baseline_trials", c.random_baseline_trials);
    }
    if (j.contains("sweep")) {
      for (const auto& p : j["sweep"]) {
        reject_unknown(p, {"margin", "lambda"}, "sweep[]");
        SweepPoint sp;
        read(p, "margin", sp.margin);
        read(p, "lambda", sp.lambda_weight);
        c.sweep.push_back(sp);
      }
    }
    if (j.contains("triage")) {
      const auto& t = j["triage"];
      reject_unknown(t, {"top_ratio", "scorer"}, "triage");
      read(t, "top_ratio", c.triage.top_ratio);
      if (t.contains("scorer")) c.triage.scorer = parse_scorer_kind(t["scorer"].get<std::string>());
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  c.propagate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace udc
