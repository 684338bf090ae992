#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace udc {

struct Document {
  std::string id;
  std::string text;
  int label = 0;
};

struct LabeledDataset {
  std::vector<Document> documents;
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return documents.size(); }
  /// Throws DataError when ids repeat or labels fall outside [0, num_classes).
  void validate() const;
};

enum class DatasetFormat { newsgroups_dirs, jsonl, csv };

DatasetFormat parse_dataset_format(std::string_view name);
std::string_view to_string(DatasetFormat format);

struct LoadOptions {
  DatasetFormat format = DatasetFormat::jsonl;
  /// Drop everything up to the first blank line of each newsgroup post.
  bool strip_headers = false;
  /// Declared class count for jsonl/csv; inferred from the labels when unset.
  std::optional<int> num_classes;
};

LabeledDataset load_dataset(const std::filesystem::path& path, const LoadOptions& options);

/// Lowercases, splits on whitespace (ASCII and the Unicode space separators) and
/// peels leading/trailing punctuation off each chunk as single-character tokens.
/// Interior punctuation stays attached ("v2.0").
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary();

  /// Appends a token if absent and returns its index.
  int add(const std::string& token);
  int index_of(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token_at(int index) const;
  std::size_t size() const { return index_to_token_.size(); }
  const std::vector<std::string>& tokens() const { return index_to_token_; }

  /// One token per line in index order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::unordered_map<std::string, int> token_to_index_;
  std::vector<std::string> index_to_token_;
};

/// Tokens with frequency >= min_count over `dataset`, ordered by frequency
/// descending then lexicographically, after PAD and UNK.
Vocabulary build_vocab(const LabeledDataset& dataset, int min_count);

enum class EmbeddingSource { pretrained, random };

struct EmbeddingMatrix {
  std::vector<float> values;  // row-major [rows x embed_dim]
  int embed_dim = 0;
  std::size_t rows = 0;
  EmbeddingSource source = EmbeddingSource::random;
  std::size_t pretrained_hits = 0;

  float at(std::size_t row, int col) const { return values[row * embed_dim + col]; }
};

inline constexpr double kRandomEmbeddingStddev = 0.1;

/// Every row N(0, 0.1^2) except PAD, which is zero.
EmbeddingMatrix random_embeddings(const Vocabulary& vocab, int embed_dim, std::uint64_t seed);

/// GloVe text format. Rows for tokens found in the file are copied verbatim,
/// the rest come from random_embeddings(seed).
EmbeddingMatrix load_pretrained_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                                           int embed_dim, std::uint64_t seed);

struct SplitSpec {
  double train_fraction = 0.7;
  double valid_fraction = 0.1;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset valid;
  LabeledDataset test;
};

/// Stratified per class. Each class contributes max(1, round(f*n)) documents to
/// the validation and test splits and the remainder to training. Documents keep
/// their original relative order within each split.
DatasetSplits split_dataset(const LabeledDataset& dataset, const SplitSpec& spec);

/// Token ids of one document, truncated to max_len; PAD is never emitted.
std::vector<std::int32_t> encode_tokens(std::string_view text, const Vocabulary& vocab, int max_len);

/// A dataset mapped through a vocabulary, ready for the network.
struct EncodedDataset {
  std::vector<std::string> ids;
  std::vector<std::vector<std::int32_t>> sequences;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return ids.size(); }
};

EncodedDataset encode_dataset(const LabeledDataset& dataset, const Vocabulary& vocab, int max_len);

}  // namespace udc
