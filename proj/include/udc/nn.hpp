#pragma once

// CNN sentence classifier with hand-written gradients:
//   embedding -> conv (one bank per kernel size) -> ReLU -> max-pool over time
//   -> dropout -> fully connected -> softmax.
// The dropout output is the document representation handed to the metric loss.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "udc/corpus.hpp"
#include "udc/rng.hpp"
#include "udc/tensor.hpp"

namespace udc {

enum class EncoderKind { cnn };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::cnn;
  int embed_dim = 200;
  std::vector<int> kernel_sizes{3, 4, 5};
  int filters_per_kernel = 100;
  double dropout_p = 0.5;
  int max_len = 200;
  int num_classes = 2;

  int feature_dim() const { return filters_per_kernel * static_cast<int>(kernel_sizes.size()); }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

enum class DropoutMode { train_stochastic, mc_stochastic, deterministic };

template <typename T>
struct ModelState {
  EncoderConfig config;
  std::size_t vocab_size = 0;
  bool freeze_embeddings = false;
  std::uint64_t rng_seed = 0;

  Parameter<T> embedding;                 // [vocab x embed_dim]
  std::vector<Parameter<T>> conv_weights;  // per kernel size s: [filters x s x embed_dim]
  std::vector<Parameter<T>> conv_biases;   // [filters]
  Parameter<T> fc_weight;                 // [num_classes x feature_dim]
  Parameter<T> fc_bias;                   // [num_classes]

  /// Every parameter in a fixed order (embedding first, fc last).
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  /// The parameters the optimizer updates (skips the embedding when frozen).
  std::vector<Parameter<T>*> trainable_parameters();
  void zero_grad();
  /// Throws ShapeError if any tensor disagrees with `config`/`vocab_size`.
  void check_shapes() const;
};

using Model = ModelState<float>;

/// Glorot-uniform conv/fc weights, zero biases, embedding copied from `embeddings`.
template <typename T>
ModelState<T> init_model(const EncoderConfig& config, const EmbeddingMatrix& embeddings, std::uint64_t seed);

/// Token ids padded with PAD to max_len. `lengths` holds the unpadded lengths.
struct TokenBatch {
  std::vector<std::int32_t> ids;  // [batch x max_len]
  std::vector<int> lengths;
  std::size_t batch = 0;
  int max_len = 0;

  static TokenBatch from_sequences(std::span<const std::vector<std::int32_t>> sequences, int max_len);
  std::span<const std::int32_t> row(std::size_t b) const {
    return {ids.data() + b * static_cast<std::size_t>(max_len), static_cast<std::size_t>(max_len)};
  }
};

/// Activations recorded by forward() for the backward pass.
template <typename T>
struct ForwardCache {
  bool valid = false;
  TokenBatch tokens;
  BasicTensor<T> pooled;     // [batch x feature_dim], post-ReLU max over time
  std::vector<int> argmax;   // [batch x feature_dim], -1 where no gradient flows
  BasicTensor<T> mask;       // [batch x feature_dim], 0 or 1/(1-p); ones when deterministic
  BasicTensor<T> features;   // pooled * mask
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;             // [batch x num_classes]
  BasicFeatureBatch<T> features;     // labels left empty
  ForwardCache<T> cache;
};

/// Deterministic part of the network: embedding, convolution, ReLU, pooling.
/// PAD embeds as the zero vector whatever its table row holds; windows start at real
/// tokens only, and a document with no real tokens pools to 0.
template <typename T>
BasicTensor<T> encode(const ModelState<T>& model, const TokenBatch& tokens, std::vector<int>* argmax = nullptr);

/// encode() over a whole sequence list, `chunk` documents at a time.
template <typename T>
BasicTensor<T> encode_all(const ModelState<T>& model, std::span<const std::vector<std::int32_t>> sequences,
                          std::size_t chunk = 64);

/// Index of the largest entry; ties go to the lower index.
template <typename T>
int argmax_index(std::span<const T> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

/// Draws an inverted-dropout mask (entries 0 or 1/(1-p)) in row-major order.
template <typename T>
void draw_dropout_mask(std::span<T> mask, double p, Rng& rng);

/// features -> logits for a batch of representations.
template <typename T>
BasicTensor<T> project(const ModelState<T>& model, const BasicTensor<T>& features);

/// `rng` is required for the stochastic modes and ignored when deterministic.
template <typename T>
ForwardResult<T> forward(const ModelState<T>& model, const TokenBatch& tokens, DropoutMode mode, Rng* rng);

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> grad;
};

/// Mean over the batch of -log softmax(logits)[label]; grad = (softmax - onehot)/batch.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

/// Row-wise softmax (max-shifted).
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

/// Accumulates gradients into the model's Parameters. `dfeatures` (the metric
/// path, may be null) is added to the gradient flowing back from the logits at
/// the representation.
template <typename T>
void backward(ModelState<T>& model, const ForwardCache<T>& cache, const BasicTensor<T>& dlogits,
              const BasicTensor<T>* dfeatures);

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Throws std::runtime_error naming the parameter when a
/// gradient is NaN/Inf (nothing is updated in that case). Gradients are zeroed.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamConfig& config);

}  // namespace udc
