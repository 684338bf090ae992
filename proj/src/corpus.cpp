#include "udc/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "udc/error.hpp"
#include "udc/rng.hpp"

namespace udc {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string strip_post_headers(const std::string& text) {
  auto pos = text.find("\n\n");
  if (pos == std::string::npos) return text;
  return text.substr(pos + 2);
}

LabeledDataset load_newsgroups(const fs::path& root, bool strip_headers) {
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());

  LabeledDataset ds;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    if (files.empty()) throw DataError("empty class directory: " + class_dirs[c].string());
    std::sort(files.begin(), files.end());
    const std::string class_name = class_dirs[c].filename().string();
    ds.class_names.push_back(class_name);
    for (const auto& file : files) {
      std::string text = read_file(file);
      if (strip_headers) text = strip_post_headers(text);
      ds.documents.push_back({class_name + "/" + file.filename().string(), std::move(text), static_cast<int>(c)});
    }
  }
  ds.num_classes = static_cast<int>(class_dirs.size());
  return ds;
}

int parse_label(const nlohmann::json& value, const std::string& where) {
  if (value.is_number_integer()) return value.get<int>();
  if (value.is_string()) {
    const auto& s = value.get_ref<const std::string&>();
    try {
      std::size_t used = 0;
      int v = std::stoi(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
  }
  throw DataError(where + ": label must be an integer");
}

std::vector<std::vector<std::string>> parse_csv(const std::string& data) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char ch = data[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < data.size() && data[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < data.size() && data[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
      row.clear();
    } else {
      field += ch;
      field_started = true;
    }
  }
  if (quoted) throw DataError("csv: unterminated quoted field");
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

void finalize_labels(LabeledDataset& ds, const LoadOptions& options, const std::string& source) {
  int max_label = -1;
  for (const auto& d : ds.documents) {
    if (d.label < 0) throw DataError(source + ": negative label in " + d.id);
    if (options.num_classes && d.label >= *options.num_classes) {
      throw DataError(source + ": label " + std::to_string(d.label) + " of " + d.id +
                      " outside declared range [0, " + std::to_string(*options.num_classes) + ")");
    }
    max_label = std::max(max_label, d.label);
  }
  ds.num_classes = options.num_classes ? *options.num_classes : max_label + 1;
  if (ds.num_classes < 2) throw DataError(source + ": need at least 2 classes");
  for (int c = 0; c < ds.num_classes; ++c) ds.class_names.push_back(std::to_string(c));
}

LabeledDataset load_jsonl(const fs::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  LabeledDataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": " + e.what());
    }
    for (const char* key : {"id", "text", "label"}) {
      if (!obj.is_object() || !obj.contains(key)) throw DataError(where + ": missing field '" + key + "'");
    }
    Document doc;
    doc.id = obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump();
    if (!obj["text"].is_string()) throw DataError(where + ": text must be a string");
    doc.text = obj["text"].get<std::string>();
    doc.label = parse_label(obj["label"], where);
    ds.documents.push_back(std::move(doc));
  }
  finalize_labels(ds, options, path.string());
  return ds;
}

LabeledDataset load_csv(const fs::path& path, const LoadOptions& options) {
  auto rows = parse_csv(read_file(path));
  if (rows.empty()) throw DataError(path.string() + ": empty csv");
  const auto& header = rows.front();
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(path.string() + ": header lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = col("id"), text_col = col("text"), label_col = col("label");
  LabeledDataset ds;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string where = path.string() + ": row " + std::to_string(r);
    if (row.size() != header.size()) throw DataError(where + ": expected " + std::to_string(header.size()) + " fields");
    ds.documents.push_back({row[id_col], row[text_col], parse_label(nlohmann::json(row[label_col]), where)});
  }
  finalize_labels(ds, options, path.string());
  return ds;
}

bool is_ascii_punct(unsigned char ch) { return ch < 0x80 && std::ispunct(ch); }

// Length of the UTF-8 whitespace sequence starting at s[i], 0 if none.
std::size_t whitespace_len(std::string_view s, std::size_t i) {
  unsigned char c0 = s[i];
  if (c0 == ' ' || (c0 >= '\t' && c0 <= '\r')) return 1;
  if (c0 == 0xC2 && i + 1 < s.size()) {
    unsigned char c1 = s[i + 1];
    if (c1 == 0x85 || c1 == 0xA0) return 2;  // NEL, NBSP
  }
  if (i + 2 < s.size()) {
    unsigned char c1 = s[i + 1], c2 = s[i + 2];
    if (c0 == 0xE1 && c1 == 0x9A && c2 == 0x80) return 3;                           // U+1680
    if (c0 == 0xE2 && c1 == 0x80 && (c2 <= 0x8A || c2 == 0xA8 || c2 == 0xA9 || c2 == 0xAF)) return 3;
    if (c0 == 0xE2 && c1 == 0x81 && c2 == 0x9F) return 3;                           // U+205F
    if (c0 == 0xE3 && c1 == 0x80 && c2 == 0x80) return 3;                           // U+3000
  }
  return 0;
}

void emit_chunk(std::string_view chunk, std::vector<std::string>& out) {
  std::size_t begin = 0, end = chunk.size();
  while (begin < end && is_ascii_punct(chunk[begin])) out.emplace_back(1, chunk[begin++]);
  std::size_t tail = end;
  while (tail > begin && is_ascii_punct(chunk[tail - 1])) --tail;
  if (tail > begin) {
    std::string word(chunk.substr(begin, tail - begin));
    for (auto& ch : word) {
      if (static_cast<unsigned char>(ch) < 0x80) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    out.push_back(std::move(word));
  }
  for (std::size_t i = tail; i < end; ++i) out.emplace_back(1, chunk[i]);
}

}  // namespace

void LabeledDataset::validate() const {
  if (num_classes < 2) throw DataError("dataset needs at least 2 classes");
  if (class_names.size() != static_cast<std::size_t>(num_classes)) throw DataError("class_names length != num_classes");
  std::unordered_set<std::string> seen;
  for (const auto& d : documents) {
    if (!seen.insert(d.id).second) throw DataError("duplicate document id: " + d.id);
    if (d.label < 0 || d.label >= num_classes) throw DataError("label out of range in " + d.id);
  }
}

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "newsgroups_dirs") return DatasetFormat::newsgroups_dirs;
  if (name == "jsonl") return DatasetFormat::jsonl;
  if (name == "csv") return DatasetFormat::csv;
  throw InvalidArgument("unknown dataset format: " + std::string(name));
}

std::string_view to_string(DatasetFormat format) {
  switch (format) {
    case DatasetFormat::newsgroups_dirs: return "newsgroups_dirs";
    case DatasetFormat::jsonl: return "jsonl";
    case DatasetFormat::csv: return "csv";
  }
  return "?";
}

LabeledDataset load_dataset(const fs::path& path, const LoadOptions& options) {
  if (!fs::exists(path)) throw DataError("dataset path does not exist: " + path.string());
  LabeledDataset ds;
  switch (options.format) {
    case DatasetFormat::newsgroups_dirs: ds = load_newsgroups(path, options.strip_headers); break;
    case DatasetFormat::jsonl: ds = load_jsonl(path, options); break;
    case DatasetFormat::csv: ds = load_csv(path, options); break;
  }
  ds.validate();
  return ds;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0, start = 0;
  while (i < text.size()) {
    if (std::size_t ws = whitespace_len(text, i)) {
      if (i > start) emit_chunk(text.substr(start, i - start), out);
      i += ws;
      start = i;
    } else {
      ++i;
    }
  }
  if (i > start) emit_chunk(text.substr(start, i - start), out);
  return out;
}

Vocabulary::Vocabulary() {
  add(std::string(kPadToken));
  add(std::string(kUnkToken));
}

int Vocabulary::add(const std::string& token) {
  auto [it, inserted] = token_to_index_.try_emplace(token, static_cast<int>(index_to_token_.size()));
  if (inserted) index_to_token_.push_back(token);
  return it->second;
}

int Vocabulary::index_of(std::string_view token) const {
  auto it = token_to_index_.find(std::string(token));
  return it == token_to_index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return token_to_index_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token_at(int index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= index_to_token_.size()) {
    throw InvalidArgument("vocabulary index out of range: " + std::to_string(index));
  }
  return index_to_token_[index];
}

void Vocabulary::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : index_to_token_) out << t << '\n';
}

Vocabulary Vocabulary::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n == 0 && line != kPadToken) throw FormatError(path.string() + ": first entry must be " + std::string(kPadToken));
    if (n == 1 && line != kUnkToken) throw FormatError(path.string() + ": second entry must be " + std::string(kUnkToken));
    if (n >= 2 && v.add(line) != static_cast<int>(n)) throw FormatError(path.string() + ": duplicate token " + line);
    ++n;
  }
  if (n < 2) throw FormatError(path.string() + ": truncated vocabulary");
  return v;
}

Vocabulary build_vocab(const LabeledDataset& dataset, int min_count) {
  if (min_count < 1) throw InvalidArgument("min_count must be >= 1");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& d : dataset.documents) {
    for (auto& t : tokenize(d.text)) ++counts[std::move(t)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= static_cast<std::size_t>(min_count)) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [tok, n] : kept) vocab.add(tok);
  return vocab;
}

EmbeddingMatrix random_embeddings(const Vocabulary& vocab, int embed_dim, std::uint64_t seed) {
  if (embed_dim < 1) throw InvalidArgument("embed_dim must be >= 1");
  EmbeddingMatrix m;
  m.embed_dim = embed_dim;
  m.rows = vocab.size();
  m.values.assign(m.rows * embed_dim, 0.0f);
  Rng rng(derive_seed(seed, {stream::kEmbedding}));
  std::normal_distribution<double> normal(0.0, kRandomEmbeddingStddev);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (int c = 0; c < embed_dim; ++c) {
      float v = static_cast<float>(normal(rng));
      if (r != static_cast<std::size_t>(Vocabulary::kPad)) m.values[r * embed_dim + c] = v;
    }
  }
  return m;
}

EmbeddingMatrix load_pretrained_embeddings(const fs::path& path, const Vocabulary& vocab, int embed_dim,
                                           std::uint64_t seed) {
  EmbeddingMatrix m = random_embeddings(vocab, embed_dim, seed);
  m.source = EmbeddingSource::pretrained;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<float> row;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    row.clear();
    std::string field;
    while (ss >> field) {
      char* end = nullptr;
      float v = std::strtof(field.c_str(), &end);
      if (end != field.c_str() + field.size() || !std::isfinite(v)) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed value '" + field + "'");
      }
      row.push_back(v);
    }
    if (line_no == 1 && static_cast<int>(row.size()) != embed_dim) {
      throw FormatError(path.string() + ": vectors have dimension " + std::to_string(row.size()) +
                        ", expected " + std::to_string(embed_dim));
    }
    if (static_cast<int>(row.size()) != embed_dim) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(embed_dim) +
                        " values, found " + std::to_string(row.size()));
    }
    if (!vocab.contains(token)) continue;
    int idx = vocab.index_of(token);
    if (idx == Vocabulary::kPad) continue;
    std::copy(row.begin(), row.end(), m.values.begin() + static_cast<std::ptrdiff_t>(idx) * embed_dim);
    ++m.pretrained_hits;
  }
  return m;
}

void SplitSpec::validate() const {
  for (double f : {train_fraction, valid_fraction, test_fraction}) {
    if (!(f > 0.0 && f < 1.0)) throw InvalidArgument("split fractions must lie in (0, 1)");
  }
  if (std::abs(train_fraction + valid_fraction + test_fraction - 1.0) > 1e-9) {
    throw InvalidArgument("split fractions must sum to 1");
  }
}

DatasetSplits split_dataset(const LabeledDataset& dataset, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.documents.size(); ++i) by_class[dataset.documents[i].label].push_back(i);

  // 0 = train, 1 = valid, 2 = test
  std::vector<int> assignment(dataset.documents.size(), 0);
  for (int c = 0; c < dataset.num_classes; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 3) {
      throw DataError("class '" + dataset.class_names[c] + "' has " + std::to_string(idx.size()) +
                      " documents; at least 3 are needed to populate every split");
    }
    Rng rng = make_stream(spec.seed, {stream::kSplit, static_cast<std::uint64_t>(c)});
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(idx[i], idx[j]);
    }
    const double n = static_cast<double>(idx.size());
    std::size_t n_valid = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.valid_fraction * n)));
    std::size_t n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.test_fraction * n)));
    while (n_valid + n_test > idx.size() - 1) {
      if (n_test >= n_valid && n_test > 1) --n_test;
      else --n_valid;
    }
    for (std::size_t k = 0; k < n_valid; ++k) assignment[idx[k]] = 1;
    for (std::size_t k = n_valid; k < n_valid + n_test; ++k) assignment[idx[k]] = 2;
  }

  DatasetSplits out;
  for (auto* part : {&out.train, &out.valid, &out.test}) {
    part->num_classes = dataset.num_classes;
    part->class_names = dataset.class_names;
  }
  for (std::size_t i = 0; i < dataset.documents.size(); ++i) {
    LabeledDataset* dst = assignment[i] == 0 ? &out.train : assignment[i] == 1 ? &out.valid : &out.test;
    dst->documents.push_back(dataset.documents[i]);
  }
  return out;
}

std::vector<std::int32_t> encode_tokens(std::string_view text, const Vocabulary& vocab, int max_len) {
  std::vector<std::int32_t> ids;
  for (const auto& t : tokenize(text)) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    ids.push_back(vocab.index_of(t));
  }
  return ids;
}

EncodedDataset encode_dataset(const LabeledDataset& dataset, const Vocabulary& vocab, int max_len) {
  EncodedDataset out;
  out.num_classes = dataset.num_classes;
  for (const auto& d : dataset.documents) {
    out.ids.push_back(d.id);
    out.sequences.push_back(encode_tokens(d.text, vocab, max_len));
    out.labels.push_back(d.label);
  }
  return out;
}

}  // namespace udc
