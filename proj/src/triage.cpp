#include "udc/triage.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <httplib.h>

#include "udc/error.hpp"

namespace udc {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string_view status_name(TriageStatus s) { return s == TriageStatus::pending ? "pending" : "labeled"; }

HumanLabel label_from_json(const json& j) {
  HumanLabel l;
  l.instance_id = j.at("instance_id").get<std::string>();
  l.label = j.at("label").get<int>();
  l.reviewer = j.at("reviewer").get<std::string>();
  l.timestamp = j.at("timestamp").get<std::string>();
  return l;
}

void write_all(int fd, const std::string& data, const fs::path& path) {
  std::size_t done = 0;
  while (done < data.size()) {
    ssize_t n = ::write(fd, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw DataError("write to " + path.string() + " failed: " + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) throw DataError("fsync of " + path.string() + " failed: " + std::strerror(errno));
}

}  // namespace

ordered_json to_json(const HumanLabel& l) {
  ordered_json j;
  j["instance_id"] = l.instance_id;
  j["label"] = l.label;
  j["reviewer"] = l.reviewer;
  j["timestamp"] = l.timestamp;
  return j;
}

ordered_json to_json(const TriageItem& item) {
  ordered_json j;
  j["instance_id"] = item.instance_id;
  j["text"] = item.text;
  j["score"] = item.score;
  j["predicted_class"] = item.predicted_class;
  j["top3"] = ordered_json::array();
  for (const auto& cf : item.top3) j["top3"].push_back({{"class", cf.class_index}, {"freq", cf.frequency}});
  j["status"] = status_name(item.status);
  j["label"] = item.label ? to_json(*item.label) : ordered_json(nullptr);
  return j;
}

ordered_json to_json(const LiveMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  ordered_json j;
  j["total"] = m.total;
  j["labeled_count"] = m.labeled_count;
  j["coverage"] = m.coverage;
  j["truth_available"] = m.truth_available;
  j["model_accuracy_on_kept"] = opt(m.model_accuracy_on_kept);
  j["combined_accuracy"] = opt(m.combined_accuracy);
  j["agreement_rate"] = opt(m.agreement_rate);
  return j;
}

TriageItem triage_item_from_json(const json& j) {
  TriageItem item;
  item.instance_id = j.at("id").get<std::string>();
  item.text = j.at("text").get<std::string>();
  item.score = j.at("score").get<double>();
  item.predicted_class = j.at("predicted_class").get<int>();
  for (const auto& cf : j.at("top3")) item.top3.push_back({cf.at("class").get<int>(), cf.at("freq").get<double>()});
  if (j.contains("true_label") && !j["true_label"].is_null()) item.true_label = j["true_label"].get<int>();
  return item;
}

bool triage_before(const TriageItem& a, const TriageItem& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.instance_id < b.instance_id;
}

TriageQueueFile read_triage_queue(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open queue file " + path.string());
  TriageQueueFile q;
  std::string line;
  std::size_t line_no = 0;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const auto j = json::parse(line);
      auto item = triage_item_from_json(j);
      const int c = j.at("num_classes").get<int>();
      if (q.num_classes == 0) {
        q.num_classes = c;
        if (j.contains("class_names")) q.class_names = j["class_names"].get<std::vector<std::string>>();
      } else if (c != q.num_classes) {
        throw FormatError("num_classes differs from earlier lines");
      }
      if (!seen.insert(item.instance_id).second) throw FormatError("duplicate id " + item.instance_id);
      q.items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw FormatError(where + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(where + ": " + e.what());
    }
  }
  if (q.class_names.empty()) {
    for (int c = 0; c < q.num_classes; ++c) q.class_names.push_back(std::to_string(c));
  }
  return q;
}

void write_triage_queue(const TriageQueueFile& queue, std::ostream& out) {
  for (const auto& item : queue.items) {
    ordered_json j;
    j["id"] = item.instance_id;
    j["text"] = item.text;
    j["score"] = item.score;
    j["predicted_class"] = item.predicted_class;
    j["top3"] = ordered_json::array();
    for (const auto& cf : item.top3) j["top3"].push_back({{"class", cf.class_index}, {"freq", cf.frequency}});
    if (item.true_label) j["true_label"] = *item.true_label;
    j["num_classes"] = queue.num_classes;
    j["class_names"] = queue.class_names;
    out << j.dump() << '\n';
  }
}

std::string utc_timestamp_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

TriageStore::TriageStore(TriageQueueFile queue, fs::path labels_path)
    : items_(std::move(queue.items)),
      num_classes_(queue.num_classes),
      class_names_(std::move(queue.class_names)),
      labels_path_(std::move(labels_path)) {
  std::stable_sort(items_.begin(), items_.end(), triage_before);
  for (std::size_t i = 0; i < items_.size(); ++i) index_[items_[i].instance_id] = i;

  if (fs::exists(labels_path_)) {
    std::ifstream in(labels_path_);
    if (!in) throw DataError("cannot read label store " + labels_path_.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = labels_path_.string() + ": line " + std::to_string(line_no);
      HumanLabel label;
      try {
        label = label_from_json(json::parse(line));
      } catch (const json::exception& e) {
        throw FormatError(where + ": corrupt label record: " + e.what());
      }
      auto it = index_.find(label.instance_id);
      if (it == index_.end()) throw FormatError(where + ": label for unknown instance " + label.instance_id);
      if (label.label < 0 || label.label >= num_classes_) throw FormatError(where + ": label out of range");
      if (items_[it->second].status == TriageStatus::labeled) continue;  // first write wins
      apply(label);
    }
  }
  fd_ = ::open(labels_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw DataError("cannot open label store " + labels_path_.string() + ": " + std::strerror(errno));
}

TriageStore::~TriageStore() {
  if (fd_ >= 0) ::close(fd_);
}

void TriageStore::apply(const HumanLabel& label) {
  auto& item = items_[index_.at(label.instance_id)];
  item.status = TriageStatus::labeled;
  item.label = label;
}

std::vector<TriageItem> TriageStore::queue(std::optional<std::size_t> limit, std::optional<TriageStatus> status) const {
  std::shared_lock lock(mutex_);
  std::vector<TriageItem> out;
  for (const auto& item : items_) {
    if (limit && out.size() >= *limit) break;
    if (status && item.status != *status) continue;
    out.push_back(item);
  }
  return out;
}

std::optional<TriageItem> TriageStore::find(const std::string& instance_id) const {
  std::shared_lock lock(mutex_);
  auto it = index_.find(instance_id);
  if (it == index_.end()) return std::nullopt;
  return items_[it->second];
}

SubmitResult TriageStore::submit(HumanLabel label) {
  std::unique_lock lock(mutex_);
  SubmitResult result;
  auto it = index_.find(label.instance_id);
  if (it == index_.end()) {
    result.status = SubmitStatus::unknown_instance;
    result.message = "unknown instance " + label.instance_id;
  } else if (label.label < 0 || label.label >= num_classes_) {
    result.status = SubmitStatus::invalid_label;
    result.message = "label " + std::to_string(label.label) + " outside [0, " + std::to_string(num_classes_) + ")";
  } else if (items_[it->second].status == TriageStatus::labeled) {
    result.status = SubmitStatus::duplicate;
    result.message = "instance " + label.instance_id + " is already labeled";
    result.stored = items_[it->second].label;
  } else {
    if (label.timestamp.empty()) label.timestamp = utc_timestamp_now();
    write_all(fd_, to_json(label).dump() + "\n", labels_path_);
    apply(label);
    result.stored = label;
  }
  result.metrics = metrics_locked();
  return result;
}

LiveMetrics TriageStore::metrics() const {
  std::shared_lock lock(mutex_);
  return metrics_locked();
}

LiveMetrics TriageStore::metrics_locked() const {
  LiveMetrics m;
  m.total = items_.size();
  m.truth_available = !items_.empty() && std::all_of(items_.begin(), items_.end(), [](const TriageItem& i) {
    return i.true_label.has_value();
  });
  std::size_t agree = 0, kept = 0, kept_correct = 0;
  for (const auto& item : items_) {
    if (item.status == TriageStatus::labeled) {
      ++m.labeled_count;
      if (item.label->label == item.predicted_class) ++agree;
    } else {
      ++kept;
      if (item.true_label && *item.true_label == item.predicted_class) ++kept_correct;
    }
  }
  m.coverage = m.total ? static_cast<double>(m.labeled_count) / static_cast<double>(m.total) : 0.0;
  if (m.labeled_count) m.agreement_rate = static_cast<double>(agree) / static_cast<double>(m.labeled_count);
  if (m.truth_available) {
    if (kept) m.model_accuracy_on_kept = static_cast<double>(kept_correct) / static_cast<double>(kept);
    m.combined_accuracy = static_cast<double>(m.labeled_count + kept_correct) / static_cast<double>(m.total);
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>Triage queue</title></head>"
    "<body><h1>Triage queue</h1><p>The review UI bundle is not installed. The JSON API is available under "
    "<code>/api/queue</code>, <code>/api/metrics</code> and <code>/api/labels</code>.</p></body></html>";

void send_json(httplib::Response& res, int status, const ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, ordered_json{{"error", message}});
}

}  // namespace

struct TriageServer::Impl {
  TriageStore& store;
  httplib::Server server;

  explicit Impl(TriageStore& s) : store(s) {}
};

TriageServer::TriageServer(TriageStore& store, std::optional<fs::path> static_dir)
    : impl_(std::make_unique<Impl>(store)) {
  auto& srv = impl_->server;
  TriageStore* st = &store;

  srv.Get("/api/queue", [st](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::size_t> limit;
    std::optional<TriageStatus> status;
    if (req.has_param("limit")) {
      try {
        const long v = std::stol(req.get_param_value("limit"));
        if (v < 0) throw std::invalid_argument("negative");
        limit = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        return send_error(res, 400, "limit must be a non-negative integer");
      }
    }
    if (req.has_param("status")) {
      const auto s = req.get_param_value("status");
      if (s == "pending") status = TriageStatus::pending;
      else if (s == "labeled") status = TriageStatus::labeled;
      else if (s != "all") return send_error(res, 400, "status must be pending, labeled or all");
    }
    ordered_json body = ordered_json::array();
    for (const auto& item : st->queue(limit, status)) body.push_back(to_json(item));
    send_json(res, 200, body);
  });

  srv.Get(R"(/api/docs/(.+))", [st](const httplib::Request& req, httplib::Response& res) {
    const auto id = httplib::detail::decode_url(req.matches[1].str(), false);
    auto item = st->find(id);
    if (!item) return send_error(res, 404, "unknown instance " + id);
    send_json(res, 200, to_json(*item));
  });

  srv.Post("/api/labels", [st](const httplib::Request& req, httplib::Response& res) {
    HumanLabel label;
    try {
      const auto j = json::parse(req.body);
      label.instance_id = j.at("instance_id").get<std::string>();
      label.label = j.at("label").get<int>();
      label.reviewer = j.contains("reviewer") ? j["reviewer"].get<std::string>() : std::string("anonymous");
    } catch (const json::exception& e) {
      return send_error(res, 400, std::string("malformed label: ") + e.what());
    }
    const auto result = st->submit(std::move(label));
    switch (result.status) {
      case SubmitStatus::accepted: return send_json(res, 201, to_json(result.metrics));
      case SubmitStatus::unknown_instance: return send_error(res, 404, result.message);
      case SubmitStatus::invalid_label: return send_error(res, 400, result.message);
      case SubmitStatus::duplicate: {
        ordered_json body{{"error", result.message}, {"label", to_json(*result.stored)},
                          {"metrics", to_json(result.metrics)}};
        return send_json(res, 409, body);
      }
    }
  });

  srv.Get("/api/metrics", [st](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, to_json(st->metrics()));
  });

  srv.Get("/api/classes", [st](const httplib::Request&, httplib::Response& res) {
    ordered_json body = ordered_json::array();
    for (int c = 0; c < st->num_classes(); ++c) body.push_back({{"class", c}, {"name", st->class_names().at(c)}});
    send_json(res, 200, body);
  });

  if (static_dir && fs::is_directory(*static_dir)) {
    srv.set_mount_point("/", static_dir->string());
  } else {
    srv.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(kPlaceholderPage, "text/html; charset=utf-8");
    });
  }
}

TriageServer::~TriageServer() { stop(); }

bool TriageServer::listen(const std::string& host, int port) { return impl_->server.listen(host, port); }

int TriageServer::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool TriageServer::serve() { return impl_->server.listen_after_bind(); }

void TriageServer::stop() {
  if (impl_) impl_->server.stop();
}

void TriageServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace udc
