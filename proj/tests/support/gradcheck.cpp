#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "udc/corpus.hpp"
#include "udc/rng.hpp"

namespace udc::testing {

namespace {

int uniform_int(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); }

double normal(Rng& rng) {
  // Box-Muller on the portable uniform source.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename T>
void forward_backward(ModelState<T>& model, const GradCheckCase& c) {
  auto tokens = TokenBatch::from_sequences(c.sequences, c.config.max_len);
  Rng rng(c.seed);
  auto fwd = forward(model, tokens, c.mode, &rng);
  auto ce = softmax_cross_entropy<T>(fwd.logits, c.labels);
  model.zero_grad();
  if (c.metric) {
    fwd.features.labels = c.labels;
    auto ml = metric_loss(fwd.features, ClassPartition::from_labels(c.labels), c.metric_config);
    for (auto& g : ml.dfeatures.values()) g = static_cast<T>(g * c.metric_weight);
    backward<T>(model, fwd.cache, ce.grad, &ml.dfeatures);
  } else {
    backward<T>(model, fwd.cache, ce.grad, nullptr);
  }
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

ParameterError compare(const std::string& name, const std::vector<double>& analytic, const std::vector<double>& numeric) {
  std::vector<double> diff(analytic.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
  ParameterError e;
  e.name = name;
  e.elements = analytic.size();
  e.analytic_norm = norm(analytic);
  const double denom = e.analytic_norm + norm(numeric);
  e.relative_error = denom > 0.0 ? norm(diff) / denom : 0.0;
  return e;
}

std::vector<double> numeric_gradient(ModelState<double>& model, Parameter<double>& p, const GradCheckCase& c,
                                     double step) {
  std::vector<double> g(p.value.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double saved = p.value[i];
    p.value[i] = saved + step;
    const double up = case_loss(model, c);
    p.value[i] = saved - step;
    const double down = case_loss(model, c);
    p.value[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

void finish(GradCheckReport& r) {
  for (const auto& p : r.parameters) r.max_relative_error = std::max(r.max_relative_error, p.relative_error);
}

}  // namespace

std::string GradCheckCase::describe() const {
  std::ostringstream ss;
  ss << "E=" << config.embed_dim << " kernels={";
  for (std::size_t i = 0; i < config.kernel_sizes.size(); ++i) ss << (i ? "," : "") << config.kernel_sizes[i];
  ss << "} F=" << config.filters_per_kernel << " C=" << config.num_classes << " max_len=" << config.max_len
     << " p=" << config.dropout_p << " batch=" << sequences.size() << " vocab=" << vocab_size
     << (metric ? " metric" : "") << (freeze_embeddings ? " frozen" : "")
     << (mode == DropoutMode::deterministic ? " deterministic" : "");
  return ss.str();
}

GradCheckCase random_case(std::uint64_t seed, int index) {
  Rng rng = make_stream(seed, {100, static_cast<std::uint64_t>(index)});
  GradCheckCase c;
  c.seed = derive_seed(seed, {101, static_cast<std::uint64_t>(index)});
  auto& cfg = c.config;
  cfg.embed_dim = uniform_int(rng, 2, 5);
  cfg.filters_per_kernel = uniform_int(rng, 2, 4);
  cfg.num_classes = uniform_int(rng, 2, 4);
  // Rotate through kernel-size sets so every size from 1 to 5 appears.
  static const std::vector<std::vector<int>> kernel_sets = {{3, 4, 5}, {1}, {2, 3}, {1, 4}, {5}, {2, 4, 5}};
  cfg.kernel_sizes = kernel_sets[static_cast<std::size_t>(index) % kernel_sets.size()];
  cfg.max_len = uniform_int(rng, *std::max_element(cfg.kernel_sizes.begin(), cfg.kernel_sizes.end()) + 1, 10);
  static const double dropout[] = {0.0, 0.3, 0.5};
  cfg.dropout_p = dropout[rng() % 3];
  c.vocab_size = static_cast<std::size_t>(uniform_int(rng, 6, 12));
  const int batch = uniform_int(rng, 3, 6);
  for (int b = 0; b < batch; ++b) {
    int length = uniform_int(rng, 1, cfg.max_len + 3);  // some exceed max_len and get truncated
    if (index % 4 == 3 && b == 0) length = 0;           // an empty document
    std::vector<std::int32_t> seq;
    for (int t = 0; t < length; ++t) seq.push_back(uniform_int(rng, 1, static_cast<int>(c.vocab_size) - 1));
    c.sequences.push_back(std::move(seq));
    c.labels.push_back(b < 2 ? b % cfg.num_classes : uniform_int(rng, 0, cfg.num_classes - 1));
  }
  c.metric = index % 2 == 0;
  c.metric_config.margin = 0.05 + 0.5 * uniform01(rng);
  c.metric_config.lambda_weight = 0.05 + uniform01(rng);
  c.metric_weight = 0.5 + uniform01(rng);
  c.freeze_embeddings = index % 5 == 4;
  c.mode = index % 6 == 5 ? DropoutMode::deterministic : DropoutMode::train_stochastic;
  return c;
}

ModelState<double> case_model(const GradCheckCase& c) {
  Rng rng = make_stream(c.seed, {200});
  EmbeddingMatrix emb;
  emb.embed_dim = c.config.embed_dim;
  emb.rows = c.vocab_size;
  emb.values.resize(c.vocab_size * static_cast<std::size_t>(emb.embed_dim));
  for (auto& v : emb.values) v = static_cast<float>(0.8 * normal(rng));
  auto model = init_model<double>(c.config, emb, c.seed);
  model.freeze_embeddings = c.freeze_embeddings;
  for (auto& b : model.conv_biases) {
    for (auto& v : b.value.values()) v = 0.3 * normal(rng) + 0.1;
  }
  for (auto& v : model.fc_bias.value.values()) v = 0.3 * normal(rng);
  for (auto& v : model.fc_weight.value.values()) v *= 3.0;
  return model;
}

double case_loss(const ModelState<double>& model, const GradCheckCase& c) {
  auto tokens = TokenBatch::from_sequences(c.sequences, c.config.max_len);
  Rng rng(c.seed);
  auto fwd = forward(model, tokens, c.mode, &rng);
  double loss = softmax_cross_entropy<double>(fwd.logits, c.labels).loss;
  if (c.metric) {
    fwd.features.labels = c.labels;
    loss += c.metric_weight *
            metric_loss(fwd.features, ClassPartition::from_labels(c.labels), c.metric_config).loss;
  }
  return loss;
}

GradCheckReport check_model_gradients(const GradCheckCase& c, double step) {
  auto model = case_model(c);
  forward_backward(model, c);
  GradCheckReport report;
  auto params = model.parameters();
  for (auto* p : params) {
    std::vector<double> analytic(p->grad.storage().begin(), p->grad.storage().end());
    if (c.freeze_embeddings && p == &model.embedding) {
      for (double g : analytic) report.frozen_embedding_untouched &= g == 0.0;
      continue;
    }
    report.parameters.push_back(compare(p->name, analytic, numeric_gradient(model, *p, c, step)));
  }
  finish(report);
  return report;
}

GradCheckReport check_float_model_gradients(const GradCheckCase& c, double step) {
  auto reference = case_model(c);
  ModelState<float> model;
  {
    EmbeddingMatrix emb;
    emb.embed_dim = c.config.embed_dim;
    emb.rows = c.vocab_size;
    for (double v : reference.embedding.value.values()) emb.values.push_back(static_cast<float>(v));
    model = init_model<float>(c.config, emb, c.seed);
    model.freeze_embeddings = c.freeze_embeddings;
    auto dst = model.parameters();
    auto src = reference.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      for (std::size_t j = 0; j < dst[i]->value.size(); ++j) {
        dst[i]->value[j] = static_cast<float>(src[i]->value[j]);
        src[i]->value[j] = static_cast<double>(dst[i]->value[j]);  // both see identical weights
      }
    }
  }
  forward_backward(model, c);
  GradCheckReport report;
  auto fparams = model.parameters();
  auto dparams = reference.parameters();
  for (std::size_t i = 0; i < fparams.size(); ++i) {
    std::vector<double> analytic(fparams[i]->grad.storage().begin(), fparams[i]->grad.storage().end());
    if (c.freeze_embeddings && i == 0) {
      for (double g : analytic) report.frozen_embedding_untouched &= g == 0.0;
      continue;
    }
    report.parameters.push_back(compare(fparams[i]->name, analytic, numeric_gradient(reference, *dparams[i], c, step)));
  }
  finish(report);
  return report;
}

GradCheckReport check_metric_gradients(std::uint64_t seed, int index, double step) {
  Rng rng = make_stream(seed, {300, static_cast<std::uint64_t>(index)});
  const int classes = uniform_int(rng, 1, 4);
  const int n = uniform_int(rng, 2, 9);
  const auto dim = static_cast<std::size_t>(uniform_int(rng, 1, 6));
  BasicFeatureBatch<double> batch;
  batch.dim = dim;
  batch.features = BasicTensor<double>({static_cast<std::size_t>(n), dim});
  for (auto& v : batch.features.values()) v = 0.6 * normal(rng);
  for (int i = 0; i < n; ++i) batch.labels.push_back(i < classes ? i : uniform_int(rng, 0, classes - 1));
  MetricConfig config;
  config.margin = 0.1 + 1.5 * uniform01(rng);
  config.lambda_weight = uniform01(rng);
  const auto partition = ClassPartition::from_labels(batch.labels);

  auto result = metric_loss(batch, partition, config);
  std::vector<double> analytic(result.dfeatures.storage().begin(), result.dfeatures.storage().end());
  std::vector<double> numeric(analytic.size());
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double saved = batch.features[i];
    batch.features[i] = saved + step;
    const double up = metric_loss(batch, partition, config).loss;
    batch.features[i] = saved - step;
    const double down = metric_loss(batch, partition, config).loss;
    batch.features[i] = saved;
    numeric[i] = (up - down) / (2.0 * step);
  }
  GradCheckReport report;
  report.parameters.push_back(compare("metric_loss.features", analytic, numeric));
  finish(report);
  return report;
}

}  // namespace udc::testing
