#pragma once

// Human triage of the most uncertain predictions: an in-memory queue backed by
// an append-only JSONL label store, plus an HTTP+JSON front end.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace udc {

enum class TriageStatus { pending, labeled };

struct HumanLabel {
  std::string instance_id;
  int label = 0;
  std::string reviewer;
  std::string timestamp;  // ISO-8601 UTC, e.g. 2026-10-18T09:30:00Z
};

struct ClassFrequency {
  int class_index = 0;
  double frequency = 0.0;
};

struct TriageItem {
  std::string instance_id;
  std::string text;
  double score = 0.0;
  int predicted_class = 0;
  std::vector<ClassFrequency> top3;  // descending frequency
  std::optional<int> true_label;
  TriageStatus status = TriageStatus::pending;
  std::optional<HumanLabel> label;
};

struct LiveMetrics {
  std::size_t total = 0;
  std::size_t labeled_count = 0;
  double coverage = 0.0;
  bool truth_available = false;
  std::optional<double> model_accuracy_on_kept;  // model accuracy on unlabeled items
  std::optional<double> combined_accuracy;       // labeled items count as correct
  std::optional<double> agreement_rate;          // human label == model prediction

  bool operator==(const LiveMetrics&) const = default;
};

nlohmann::ordered_json to_json(const TriageItem& item);
nlohmann::ordered_json to_json(const LiveMetrics& metrics);
nlohmann::ordered_json to_json(const HumanLabel& label);

/// One queue line as written by triage-export.
TriageItem triage_item_from_json(const nlohmann::json& j);

struct TriageQueueFile {
  std::vector<TriageItem> items;
  int num_classes = 0;
  std::vector<std::string> class_names;
};

TriageQueueFile read_triage_queue(const std::filesystem::path& path);
void write_triage_queue(const TriageQueueFile& queue, std::ostream& out);

/// Orders by score descending, then instance_id ascending.
bool triage_before(const TriageItem& a, const TriageItem& b);

std::string utc_timestamp_now();

enum class SubmitStatus { accepted, unknown_instance, duplicate, invalid_label };

struct SubmitResult {
  SubmitStatus status = SubmitStatus::accepted;
  std::string message;
  LiveMetrics metrics;
  std::optional<HumanLabel> stored;  // the label now on record (original on duplicate)
};

/// Thread-safe queue state. Readers share a lock; label submission takes the
/// exclusive lock, appends and fsyncs the store line, then applies it in memory,
/// so every acknowledged label is durable and readers never see half a write.
class TriageStore {
 public:
  /// Replays `labels_path` (created when absent). Throws FormatError naming the
  /// line number on a corrupt record.
  TriageStore(TriageQueueFile queue, std::filesystem::path labels_path);
  ~TriageStore();
  TriageStore(const TriageStore&) = delete;
  TriageStore& operator=(const TriageStore&) = delete;

  /// Items in queue order, optionally filtered by status and truncated to `limit`.
  std::vector<TriageItem> queue(std::optional<std::size_t> limit, std::optional<TriageStatus> status) const;
  std::optional<TriageItem> find(const std::string& instance_id) const;
  SubmitResult submit(HumanLabel label);
  LiveMetrics metrics() const;
  int num_classes() const { return num_classes_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

 private:
  LiveMetrics metrics_locked() const;
  void apply(const HumanLabel& label);

  mutable std::shared_mutex mutex_;
  std::vector<TriageItem> items_;
  std::unordered_map<std::string, std::size_t> index_;
  int num_classes_ = 0;
  std::vector<std::string> class_names_;
  std::filesystem::path labels_path_;
  int fd_ = -1;
};

/// HTTP front end over a TriageStore.
///   GET  /api/queue?limit=N&status=pending|labeled|all
///   GET  /api/docs/{id}
///   POST /api/labels {instance_id, label, reviewer} -> 201 + LiveMetrics
///   GET  /api/metrics
///   GET  /api/classes
///   GET  /  static UI bundle from `static_dir`, or a placeholder page
class TriageServer {
 public:
  TriageServer(TriageStore& store, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~TriageServer();

  /// Binds and serves until stop(). Returns false when the bind fails.
  bool listen(const std::string& host, int port);
  /// Binds to an ephemeral port and returns it (or -1); call serve() afterwards.
  int bind_any_port(const std::string& host);
  bool serve();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace udc
