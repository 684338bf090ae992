#include "udc/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "udc/error.hpp"
#include "udc/metric_loss.hpp"
#include "udc/rng.hpp"
#include "udc/train.hpp"

namespace udc {

namespace {

struct McPasses {
  PredictionSamples samples;
  std::vector<double> mean_softmax;  // [num_instances x num_classes], filled on request
};

McPasses run_mc(const Model& model, const EncodedDataset& documents, int num_samples, std::uint64_t seed,
                bool want_softmax) {
  if (num_samples < 1) throw InvalidArgument("num_samples must be >= 1");
  const std::size_t n = documents.size();
  const std::size_t T = static_cast<std::size_t>(num_samples);
  const std::size_t D = static_cast<std::size_t>(model.config.feature_dim());
  const std::size_t C = static_cast<std::size_t>(model.config.num_classes);
  // Dropout sits after pooling, so the convolutional stack runs once per document.
  const Tensor pooled = encode_all(model, std::span<const std::vector<std::int32_t>>(documents.sequences));

  McPasses out;
  out.samples.num_instances = n;
  out.samples.num_samples = T;
  out.samples.num_classes = model.config.num_classes;
  out.samples.sampled_classes.resize(n * T);
  if (want_softmax) out.mean_softmax.assign(n * C, 0.0);

  Tensor features({T, D});
  std::vector<float> mask(D);
  for (std::size_t i = 0; i < n; ++i) {
    auto base = pooled.row(i);
    for (std::size_t t = 0; t < T; ++t) {
      Rng rng = make_stream(seed, {stream::kMonteCarlo, i, t});
      draw_dropout_mask<float>(mask, model.config.dropout_p, rng);
      auto dst = features.row(t);
      for (std::size_t d = 0; d < D; ++d) dst[d] = base[d] * mask[d];
    }
    const Tensor logits = project(model, features);
    for (std::size_t t = 0; t < T; ++t) out.samples.sampled_classes[i * T + t] = argmax_index<float>(logits.row(t));
    if (want_softmax) {
      const Tensor probs = softmax(logits);
      for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0;
        for (std::size_t t = 0; t < T; ++t) sum += probs.at(t, c);
        out.mean_softmax[i * C + c] = sum / static_cast<double>(T);
      }
    }
  }
  return out;
}

void require_kind(const ScorerConfig& config, ScorerKind kind) {
  config.validate();
  if (config.kind != kind) {
    throw InvalidArgument("scorer config kind " + std::string(to_string(config.kind)) + " passed to " +
                          std::string(to_string(kind)));
  }
}

}  // namespace

ScorerKind parse_scorer_kind(std::string_view name) {
  if (name == "dropout_entropy") return ScorerKind::dropout_entropy;
  if (name == "dropout_baseline") return ScorerKind::dropout_baseline;
  if (name == "pl_variance") return ScorerKind::pl_variance;
  if (name == "distance_knn") return ScorerKind::distance_knn;
  throw InvalidArgument("unknown scorer: " + std::string(name));
}

std::string_view to_string(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::dropout_entropy: return "dropout_entropy";
    case ScorerKind::dropout_baseline: return "dropout_baseline";
    case ScorerKind::pl_variance: return "pl_variance";
    case ScorerKind::distance_knn: return "distance_knn";
  }
  return "?";
}

void ScorerConfig::validate() const {
  const bool stochastic = kind == ScorerKind::dropout_entropy || kind == ScorerKind::dropout_baseline;
  if (stochastic && num_samples < 2) throw InvalidArgument("stochastic scorers need num_samples >= 2");
  if (knn_k < 1) throw InvalidArgument("knn_k must be >= 1");
}

PredictionSamples mc_sample(const Model& model, const EncodedDataset& documents, int num_samples,
                            std::uint64_t seed) {
  if (num_samples < 2) throw InvalidArgument("mc_sample needs num_samples >= 2");
  return run_mc(model, documents, num_samples, seed, false).samples;
}

std::vector<int> bin_count(std::span<const int> samples, int num_classes) {
  std::vector<int> hist(static_cast<std::size_t>(num_classes), 0);
  for (int c : samples) {
    if (c < 0 || c >= num_classes) throw InvalidArgument("sampled class " + std::to_string(c) + " out of range");
    ++hist[static_cast<std::size_t>(c)];
  }
  return hist;
}

int kept_bins(int num_classes) { return num_classes > 10 ? (2 * num_classes) / 3 : num_classes; }

std::vector<int> mask_top_m(std::span<const int> histogram, int num_classes) {
  std::vector<int> out(histogram.begin(), histogram.end());
  if (num_classes <= 10) return out;
  std::vector<int> order(out.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return out[a] > out[b]; });
  const std::size_t keep = std::min<std::size_t>(out.size(), static_cast<std::size_t>(kept_bins(num_classes)));
  for (std::size_t r = keep; r < order.size(); ++r) out[order[r]] = 0;
  return out;
}

std::vector<double> normalize(std::span<const int> histogram) {
  const double sum = std::accumulate(histogram.begin(), histogram.end(), 0.0);
  if (!(sum > 0.0)) throw InvalidArgument("cannot normalize an all-zero histogram");
  std::vector<double> p(histogram.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = histogram[i] / sum;
  return p;
}

double entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double dropout_entropy(std::span<const int> samples, int num_classes) {
  const auto hist = bin_count(samples, num_classes);
  const auto masked = mask_top_m(hist, num_classes);
  const auto p = normalize(masked);
  return entropy(p);
}

std::vector<UncertaintyScore> de_score(const Model& model, const EncodedDataset& documents,
                                       const ScorerConfig& config) {
  require_kind(config, ScorerKind::dropout_entropy);
  const auto samples = mc_sample(model, documents, config.num_samples, config.seed);
  std::vector<UncertaintyScore> out;
  out.reserve(documents.size());
  for (std::size_t i = 0; i < documents.size(); ++i) {
    UncertaintyScore s;
    s.instance_id = documents.ids[i];
    s.scorer = ScorerKind::dropout_entropy;
    s.histogram = bin_count(samples.row(i), samples.num_classes);
    s.predicted_class = argmax_index<int>(s.histogram);
    s.value = entropy(normalize(mask_top_m(s.histogram, samples.num_classes)));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<UncertaintyScore> dropout_baseline_score(const Model& model, const EncodedDataset& documents,
                                                     const ScorerConfig& config) {
  require_kind(config, ScorerKind::dropout_baseline);
  const auto mc = run_mc(model, documents, config.num_samples, config.seed, true);
  const std::size_t C = static_cast<std::size_t>(model.config.num_classes);
  std::vector<UncertaintyScore> out;
  out.reserve(documents.size());
  for (std::size_t i = 0; i < documents.size(); ++i) {
    std::span<const double> mean(mc.mean_softmax.data() + i * C, C);
    UncertaintyScore s;
    s.instance_id = documents.ids[i];
    s.scorer = ScorerKind::dropout_baseline;
    s.value = entropy(mean);
    s.predicted_class = argmax_index<double>(mean);
    s.histogram = bin_count(mc.samples.row(i), mc.samples.num_classes);
    out.push_back(std::move(s));
  }
  return out;
}

double logit_variance(std::span<const float> logits) {
  if (logits.empty()) throw InvalidArgument("variance of an empty logit vector");
  double mean = 0.0;
  for (float v : logits) mean += v;
  mean /= static_cast<double>(logits.size());
  double var = 0.0;
  for (float v : logits) var += (v - mean) * (v - mean);
  return var / static_cast<double>(logits.size());
}

std::vector<UncertaintyScore> pl_variance_score(const Model& model, const EncodedDataset& documents) {
  const Tensor logits = predict_logits(model, documents);
  std::vector<UncertaintyScore> out;
  out.reserve(documents.size());
  for (std::size_t i = 0; i < documents.size(); ++i) {
    UncertaintyScore s;
    s.instance_id = documents.ids[i];
    s.scorer = ScorerKind::pl_variance;
    // Negated: flat logits (low variance) are the most uncertain. -0.0 folds to 0.
    s.value = -logit_variance(logits.row(i)) + 0.0;
    s.predicted_class = argmax_index<float>(logits.row(i));
    out.push_back(std::move(s));
  }
  return out;
}

double knn_uncertainty(std::span<const float> feature, int predicted_class, const FeatureBatch& train_features,
                       int k) {
  const std::size_t n = train_features.size();
  if (n == 0) throw InvalidArgument("distance scorer needs training features");
  if (k < 1 || static_cast<std::size_t>(k) > n) throw InvalidArgument("knn_k must lie in [1, |train_features|]");
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t j = 0; j < n; ++j) {
    dist[j] = {pairwise_distance<float>(feature, train_features.features.row(j), train_features.dim), j};
  }
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
  double agree = 0.0, total = 0.0;
  for (int r = 0; r < k; ++r) {
    const double w = std::exp(-dist[r].first);
    total += w;
    if (train_features.labels[dist[r].second] == predicted_class) agree += w;
  }
  return total > 0.0 ? 1.0 - agree / total : 1.0;
}

std::vector<UncertaintyScore> distance_confidence_score(const Model& model, const EncodedDataset& documents,
                                                        const FeatureBatch& train_features,
                                                        const ScorerConfig& config) {
  require_kind(config, ScorerKind::distance_knn);
  if (train_features.size() == 0) throw InvalidArgument("distance scorer needs training features");
  if (train_features.dim != static_cast<std::size_t>(model.config.feature_dim())) {
    throw ShapeError("training features do not match the model feature width");
  }
  const Tensor pooled = encode_all(model, std::span<const std::vector<std::int32_t>>(documents.sequences));
  const Tensor logits = project(model, pooled);
  std::vector<UncertaintyScore> out;
  out.reserve(documents.size());
  for (std::size_t i = 0; i < documents.size(); ++i) {
    UncertaintyScore s;
    s.instance_id = documents.ids[i];
    s.scorer = ScorerKind::distance_knn;
    s.predicted_class = argmax_index<float>(logits.row(i));
    s.value = knn_uncertainty(pooled.row(i), s.predicted_class, train_features, config.knn_k);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<UncertaintyScore> score(const Model& model, const EncodedDataset& documents, const ScorerConfig& config,
                                    const FeatureBatch* train_features) {
  switch (config.kind) {
    case ScorerKind::dropout_entropy: return de_score(model, documents, config);
    case ScorerKind::dropout_baseline: return dropout_baseline_score(model, documents, config);
    case ScorerKind::pl_variance: return pl_variance_score(model, documents);
    case ScorerKind::distance_knn:
      if (!train_features) throw InvalidArgument("distance_knn needs training features");
      return distance_confidence_score(model, documents, *train_features, config);
  }
  throw InvalidArgument("unknown scorer kind");
}

void write_scores_jsonl(std::span<const UncertaintyScore> scores, std::span<const int> true_labels,
                        std::ostream& out) {
  if (!true_labels.empty() && true_labels.size() != scores.size()) {
    throw InvalidArgument("true label count does not match score count");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& s = scores[i];
    nlohmann::ordered_json obj;
    obj["id"] = s.instance_id;
    obj["scorer"] = to_string(s.scorer);
    obj["score"] = s.value;
    obj["predicted_class"] = s.predicted_class;
    if (!s.histogram.empty()) obj["histogram"] = s.histogram;
    if (!true_labels.empty()) obj["true_label"] = true_labels[i];
    out << obj.dump() << '\n';
  }
}

std::vector<ScoreRecord> read_scores_jsonl(std::istream& in, const std::string& source) {
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    try {
      const auto obj = nlohmann::json::parse(line);
      ScoreRecord r;
      r.score.instance_id = obj.at("id").get<std::string>();
      r.score.scorer = parse_scorer_kind(obj.at("scorer").get<std::string>());
      r.score.value = obj.at("score").get<double>();
      r.score.predicted_class = obj.at("predicted_class").get<int>();
      if (obj.contains("histogram")) r.score.histogram = obj["histogram"].get<std::vector<int>>();
      if (obj.contains("true_label")) r.true_label = obj["true_label"].get<int>();
      if (!std::isfinite(r.score.value)) throw FormatError("non-finite score");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    } catch (const std::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace udc
