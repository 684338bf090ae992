#include "udc/nn.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <Eigen/Core>

#include "udc/error.hpp"

namespace udc {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using WindowMap = Eigen::Map<const RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

int max_kernel(const EncoderConfig& c) { return *std::max_element(c.kernel_sizes.begin(), c.kernel_sizes.end()); }

// Number of positions of the embedded sequence a document needs, given windows
// may start at any real token and run into the padding.
int rows_needed(int length, const EncoderConfig& c) {
  if (length == 0) return 0;
  return std::min(length + max_kernel(c) - 1, c.max_len);
}

int window_count(int length, int kernel, int max_len) { return std::max(0, std::min(length, max_len - kernel + 1)); }

template <typename T>
void gather_embeddings(const ModelState<T>& model, std::span<const std::int32_t> ids, int rows, std::vector<T>& out) {
  const int E = model.config.embed_dim;
  out.resize(static_cast<std::size_t>(rows) * E);
  const T* table = model.embedding.value.data();
  for (int p = 0; p < rows; ++p) {
    const std::int32_t id = ids[p];
    if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size) {
      throw InvalidArgument("token id " + std::to_string(id) + " out of range for vocabulary of " +
                            std::to_string(model.vocab_size));
    }
    T* dst = out.data() + static_cast<std::size_t>(p) * E;
    if (id == Vocabulary::kPad) {
      std::fill_n(dst, E, T(0));
    } else {
      std::copy_n(table + static_cast<std::size_t>(id) * E, E, dst);
    }
  }
}

void check_tokens(const TokenBatch& tokens, const EncoderConfig& config) {
  if (tokens.max_len != config.max_len) {
    throw ShapeError("token batch max_len " + std::to_string(tokens.max_len) + " != model max_len " +
                     std::to_string(config.max_len));
  }
  if (tokens.ids.size() != tokens.batch * static_cast<std::size_t>(tokens.max_len) ||
      tokens.lengths.size() != tokens.batch) {
    throw ShapeError("token batch storage does not match batch x max_len");
  }
}

template <typename T>
void require_finite(const BasicTensor<T>& t, const char* what) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
  }
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? " x " : "") << shape[i];
  ss << ']';
  return ss.str();
}

void EncoderConfig::validate() const {
  if (embed_dim < 1) throw InvalidArgument("embed_dim must be >= 1");
  if (kernel_sizes.empty()) throw InvalidArgument("kernel_sizes must not be empty");
  for (int s : kernel_sizes) {
    if (s < 1) throw InvalidArgument("kernel sizes must be >= 1");
    if (s > max_len) throw InvalidArgument("kernel size exceeds max_len");
  }
  if (filters_per_kernel < 1) throw InvalidArgument("filters_per_kernel must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw InvalidArgument("dropout_p must lie in [0, 1)");
  if (num_classes < 2) throw InvalidArgument("num_classes must be >= 2");
}

template <typename T>
std::vector<Parameter<T>*> ModelState<T>::parameters() {
  std::vector<Parameter<T>*> out{&embedding};
  for (std::size_t k = 0; k < conv_weights.size(); ++k) {
    out.push_back(&conv_weights[k]);
    out.push_back(&conv_biases[k]);
  }
  out.push_back(&fc_weight);
  out.push_back(&fc_bias);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ModelState<T>::parameters() const {
  auto mutable_params = const_cast<ModelState<T>*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
std::vector<Parameter<T>*> ModelState<T>::trainable_parameters() {
  auto all = parameters();
  if (freeze_embeddings) all.erase(all.begin());
  return all;
}

template <typename T>
void ModelState<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
void ModelState<T>::check_shapes() const {
  auto expect = [](const Parameter<T>& p, std::vector<std::size_t> shape) {
    for (const auto* t : {&p.value, &p.grad, &p.m1, &p.m2}) {
      if (t->shape() != shape) {
        throw ShapeError("parameter " + p.name + " has shape " + shape_string(t->shape()) + ", expected " +
                         shape_string(shape));
      }
    }
  };
  const auto E = static_cast<std::size_t>(config.embed_dim);
  const auto F = static_cast<std::size_t>(config.filters_per_kernel);
  expect(embedding, {vocab_size, E});
  if (conv_weights.size() != config.kernel_sizes.size() || conv_biases.size() != config.kernel_sizes.size()) {
    throw ShapeError("conv bank count does not match kernel_sizes");
  }
  for (std::size_t k = 0; k < config.kernel_sizes.size(); ++k) {
    expect(conv_weights[k], {F, static_cast<std::size_t>(config.kernel_sizes[k]), E});
    expect(conv_biases[k], {F});
  }
  expect(fc_weight, {static_cast<std::size_t>(config.num_classes), static_cast<std::size_t>(config.feature_dim())});
  expect(fc_bias, {static_cast<std::size_t>(config.num_classes)});
}

template <typename T>
ModelState<T> init_model(const EncoderConfig& config, const EmbeddingMatrix& embeddings, std::uint64_t seed) {
  config.validate();
  if (embeddings.embed_dim != config.embed_dim) {
    throw ShapeError("embedding dimension " + std::to_string(embeddings.embed_dim) + " != encoder embed_dim " +
                     std::to_string(config.embed_dim));
  }
  ModelState<T> m;
  m.config = config;
  m.vocab_size = embeddings.rows;
  m.rng_seed = seed;
  const auto E = static_cast<std::size_t>(config.embed_dim);
  const auto F = static_cast<std::size_t>(config.filters_per_kernel);

  BasicTensor<T> emb({m.vocab_size, E});
  for (std::size_t i = 0; i < emb.size(); ++i) emb[i] = static_cast<T>(embeddings.values[i]);
  m.embedding = Parameter<T>("embedding", std::move(emb));

  Rng rng = make_stream(seed, {stream::kInit});
  auto glorot = [&](BasicTensor<T>& t, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : t.values()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
  };
  for (int s : config.kernel_sizes) {
    BasicTensor<T> w({F, static_cast<std::size_t>(s), E});
    glorot(w, static_cast<double>(s) * E, static_cast<double>(F));
    m.conv_weights.emplace_back("conv" + std::to_string(s) + ".weight", std::move(w));
    m.conv_biases.emplace_back("conv" + std::to_string(s) + ".bias", BasicTensor<T>({F}));
  }
  const auto C = static_cast<std::size_t>(config.num_classes);
  BasicTensor<T> fc({C, static_cast<std::size_t>(config.feature_dim())});
  glorot(fc, config.feature_dim(), static_cast<double>(C));
  m.fc_weight = Parameter<T>("fc.weight", std::move(fc));
  m.fc_bias = Parameter<T>("fc.bias", BasicTensor<T>({C}));
  return m;
}

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>> sequences, int max_len) {
  TokenBatch b;
  b.batch = sequences.size();
  b.max_len = max_len;
  b.ids.assign(b.batch * static_cast<std::size_t>(max_len), Vocabulary::kPad);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const int n = std::min<int>(max_len, static_cast<int>(sequences[i].size()));
    for (int p = 0; p < n; ++p) {
      if (sequences[i][p] == Vocabulary::kPad) throw InvalidArgument("PAD inside a token sequence");
      b.ids[i * max_len + p] = sequences[i][p];
    }
    b.lengths.push_back(n);
  }
  return b;
}

template <typename T>
BasicTensor<T> encode(const ModelState<T>& model, const TokenBatch& tokens, std::vector<int>* argmax) {
  const auto& cfg = model.config;
  check_tokens(tokens, cfg);
  const int E = cfg.embed_dim;
  const int F = cfg.filters_per_kernel;
  const std::size_t D = static_cast<std::size_t>(cfg.feature_dim());
  BasicTensor<T> pooled({tokens.batch, D});
  if (argmax) argmax->assign(tokens.batch * D, -1);

  std::vector<T> x;
  RowMatrix<T> conv;
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    const int length = tokens.lengths[b];
    const int rows = rows_needed(length, cfg);
    gather_embeddings(model, tokens.row(b), rows, x);
    for (std::size_t k = 0; k < cfg.kernel_sizes.size(); ++k) {
      const int s = cfg.kernel_sizes[k];
      const int windows = window_count(length, s, cfg.max_len);
      if (windows == 0) continue;
      WindowMap<T> win(x.data(), windows, static_cast<Eigen::Index>(s) * E, Eigen::OuterStride<>(E));
      ConstMatrixMap<T> w(model.conv_weights[k].value.data(), F, static_cast<Eigen::Index>(s) * E);
      conv.noalias() = win * w.transpose();
      const T* bias = model.conv_biases[k].value.data();
      for (int f = 0; f < F; ++f) {
        int best = 0;
        T best_value = conv(0, f);
        for (int t = 1; t < windows; ++t) {
          if (conv(t, f) > best_value) {
            best_value = conv(t, f);
            best = t;
          }
        }
        const T pre = best_value + bias[f];
        const std::size_t col = k * F + f;
        if (pre > T(0)) {
          pooled.at(b, col) = pre;
          if (argmax) (*argmax)[b * D + col] = best;
        }
      }
    }
  }
  return pooled;
}

template <typename T>
BasicTensor<T> encode_all(const ModelState<T>& model, std::span<const std::vector<std::int32_t>> sequences,
                          std::size_t chunk) {
  const std::size_t D = static_cast<std::size_t>(model.config.feature_dim());
  BasicTensor<T> out({sequences.size(), D});
  for (std::size_t begin = 0; begin < sequences.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, sequences.size() - begin);
    auto tokens = TokenBatch::from_sequences(sequences.subspan(begin, n), model.config.max_len);
    auto pooled = encode(model, tokens);
    std::copy(pooled.storage().begin(), pooled.storage().end(), out.data() + begin * D);
  }
  return out;
}

template <typename T>
void draw_dropout_mask(std::span<T> mask, double p, Rng& rng) {
  if (p <= 0.0) {
    std::fill(mask.begin(), mask.end(), T(1));
    return;
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) m = uniform01(rng) < p ? T(0) : keep_scale;
}

template <typename T>
BasicTensor<T> project(const ModelState<T>& model, const BasicTensor<T>& features) {
  const auto C = static_cast<Eigen::Index>(model.config.num_classes);
  const auto D = static_cast<Eigen::Index>(model.config.feature_dim());
  if (features.rank() != 2 || features.dim(1) != static_cast<std::size_t>(D)) {
    throw ShapeError("features have shape " + shape_string(features.shape()) + ", expected [batch x " +
                     std::to_string(D) + "]");
  }
  const auto B = static_cast<Eigen::Index>(features.dim(0));
  BasicTensor<T> logits({features.dim(0), static_cast<std::size_t>(C)});
  ConstMatrixMap<T> r(features.data(), B, D);
  ConstMatrixMap<T> w(model.fc_weight.value.data(), C, D);
  MatrixMap<T> out(logits.data(), B, C);
  out.noalias() = r * w.transpose();
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index c = 0; c < C; ++c) out(b, c) += model.fc_bias.value[c];
  }
  return logits;
}

template <typename T>
ForwardResult<T> forward(const ModelState<T>& model, const TokenBatch& tokens, DropoutMode mode, Rng* rng) {
  ForwardResult<T> res;
  auto& cache = res.cache;
  cache.tokens = tokens;
  cache.pooled = encode(model, tokens, &cache.argmax);
  cache.mask = BasicTensor<T>(cache.pooled.shape(), T(1));
  if (mode != DropoutMode::deterministic) {
    if (!rng) throw InvalidArgument("stochastic dropout requires an rng stream");
    draw_dropout_mask(cache.mask.values(), model.config.dropout_p, *rng);
  }
  cache.features = cache.pooled;
  for (std::size_t i = 0; i < cache.features.size(); ++i) cache.features[i] *= cache.mask[i];
  cache.valid = true;
  res.logits = project(model, cache.features);
  require_finite(res.logits, "logits");
  res.features.features = cache.features;
  res.features.dim = static_cast<std::size_t>(model.config.feature_dim());
  return res;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  BasicTensor<T> out(logits.shape());
  const std::size_t C = logits.dim(1);
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    auto in = logits.row(b);
    auto o = out.row(b);
    const T mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(in[c] - mx));
    for (std::size_t c = 0; c < C; ++c) o[c] = static_cast<T>(std::exp(static_cast<double>(in[c] - mx)) / sum);
  }
  return out;
}

template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw ShapeError("logits/labels batch mismatch");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  LossAndGrad<T> out{0.0, BasicTensor<T>(logits.shape())};
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C) throw InvalidArgument("label out of range");
    auto in = logits.row(b);
    const double mx = static_cast<double>(*std::max_element(in.begin(), in.end()));
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(in[c]) - mx);
    const double log_z = mx + std::log(sum);
    out.loss += log_z - static_cast<double>(in[y]);
    auto g = out.grad.row(b);
    for (std::size_t c = 0; c < C; ++c) {
      const double p = std::exp(static_cast<double>(in[c]) - log_z);
      g[c] = static_cast<T>((p - (static_cast<int>(c) == y ? 1.0 : 0.0)) / static_cast<double>(B));
    }
  }
  out.loss /= static_cast<double>(B);
  return out;
}

template <typename T>
void backward(ModelState<T>& model, const ForwardCache<T>& cache, const BasicTensor<T>& dlogits,
              const BasicTensor<T>* dfeatures) {
  if (!cache.valid) throw std::logic_error("backward called without a recorded forward pass");
  const auto& cfg = model.config;
  const auto B = static_cast<Eigen::Index>(cache.tokens.batch);
  const auto C = static_cast<Eigen::Index>(cfg.num_classes);
  const auto D = static_cast<Eigen::Index>(cfg.feature_dim());
  if (dlogits.shape() != std::vector<std::size_t>{cache.tokens.batch, static_cast<std::size_t>(C)}) {
    throw ShapeError("dlogits has shape " + shape_string(dlogits.shape()));
  }
  if (dfeatures && !dfeatures->same_shape(cache.features)) {
    throw ShapeError("dfeatures has shape " + shape_string(dfeatures->shape()));
  }

  // Linear head.
  ConstMatrixMap<T> g(dlogits.data(), B, C);
  ConstMatrixMap<T> r(cache.features.data(), B, D);
  MatrixMap<T> dw(model.fc_weight.grad.data(), C, D);
  dw.noalias() += g.transpose() * r;
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index c = 0; c < C; ++c) model.fc_bias.grad[c] += g(b, c);
  }
  RowMatrix<T> dr = g * ConstMatrixMap<T>(model.fc_weight.value.data(), C, D);
  if (dfeatures) dr += ConstMatrixMap<T>(dfeatures->data(), B, D);

  // Dropout reuses the recorded mask; pooling routes to the recorded argmax.
  const int E = cfg.embed_dim;
  const int F = cfg.filters_per_kernel;
  const bool embed_grad = !model.freeze_embeddings;
  std::vector<T> x, dx;
  for (Eigen::Index b = 0; b < B; ++b) {
    const int length = cache.tokens.lengths[b];
    const int rows = rows_needed(length, cfg);
    if (rows == 0) continue;
    auto ids = cache.tokens.row(b);
    gather_embeddings(model, ids, rows, x);
    if (embed_grad) dx.assign(x.size(), T(0));
    bool any = false;
    for (std::size_t k = 0; k < cfg.kernel_sizes.size(); ++k) {
      const int s = cfg.kernel_sizes[k];
      const std::size_t width = static_cast<std::size_t>(s) * E;
      const T* w = model.conv_weights[k].value.data();
      T* dw_conv = model.conv_weights[k].grad.data();
      T* db_conv = model.conv_biases[k].grad.data();
      for (int f = 0; f < F; ++f) {
        const std::size_t col = k * F + f;
        const int t = cache.argmax[b * D + col];
        if (t < 0) continue;
        const T grad = dr(b, static_cast<Eigen::Index>(col)) * cache.mask.at(b, col);
        if (grad == T(0)) continue;
        any = true;
        db_conv[f] += grad;
        const T* xw = x.data() + static_cast<std::size_t>(t) * E;
        T* dwf = dw_conv + f * width;
        const T* wf = w + f * width;
        for (std::size_t i = 0; i < width; ++i) dwf[i] += grad * xw[i];
        if (embed_grad) {
          T* dxw = dx.data() + static_cast<std::size_t>(t) * E;
          for (std::size_t i = 0; i < width; ++i) dxw[i] += grad * wf[i];
        }
      }
    }
    if (!embed_grad || !any) continue;
    T* demb = model.embedding.grad.data();
    for (int p = 0; p < rows; ++p) {
      const std::int32_t id = ids[p];
      if (id == Vocabulary::kPad) continue;
      T* dst = demb + static_cast<std::size_t>(id) * E;
      const T* src = dx.data() + static_cast<std::size_t>(p) * E;
      for (int e = 0; e < E; ++e) dst[e] += src[e];
    }
  }
}

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamConfig& config) {
  for (const auto* p : params) {
    for (T g : p->grad.values()) {
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  for (auto* p : params) {
    ++p->step_count;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(p->step_count));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(p->step_count));
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    const T step = static_cast<T>(config.learning_rate / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(config.epsilon);
    T* v = p->value.data();
    T* g = p->grad.data();
    T* m1 = p->m1.data();
    T* m2 = p->m2.data();
    for (std::size_t i = 0, n = p->value.size(); i < n; ++i) {
      m1[i] = b1 * m1[i] + (T(1) - b1) * g[i];
      m2[i] = b2 * m2[i] + (T(1) - b2) * g[i] * g[i];
      v[i] -= step * m1[i] / (std::sqrt(m2[i] * inv_bc2) + eps);
      g[i] = T(0);
    }
  }
}

#define UDC_INSTANTIATE_NN(T)                                                                                  \
  template struct ModelState<T>;                                                                               \
  template ModelState<T> init_model<T>(const EncoderConfig&, const EmbeddingMatrix&, std::uint64_t);           \
  template BasicTensor<T> encode<T>(const ModelState<T>&, const TokenBatch&, std::vector<int>*);               \
  template BasicTensor<T> encode_all<T>(const ModelState<T>&, std::span<const std::vector<std::int32_t>>,        \
                                        std::size_t);                                                          \
  template void draw_dropout_mask<T>(std::span<T>, double, Rng&);                                              \
  template BasicTensor<T> project<T>(const ModelState<T>&, const BasicTensor<T>&);                             \
  template ForwardResult<T> forward<T>(const ModelState<T>&, const TokenBatch&, DropoutMode, Rng*);            \
  template BasicTensor<T> softmax<T>(const BasicTensor<T>&);                                                   \
  template LossAndGrad<T> softmax_cross_entropy<T>(const BasicTensor<T>&, std::span<const int>);               \
  template void backward<T>(ModelState<T>&, const ForwardCache<T>&, const BasicTensor<T>&,                     \
                            const BasicTensor<T>*);                                                            \
  template void adam_step<T>(std::span<Parameter<T>* const>, const AdamConfig&);

UDC_INSTANTIATE_NN(float)
UDC_INSTANTIATE_NN(double)

#undef UDC_INSTANTIATE_NN

}  // namespace udc
